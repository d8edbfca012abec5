"""Nonstationary gamma-process section loss and its discrete corrosion states.

Cumulative loss ``D(tau)`` is Gamma distributed with shape ``a * tau**b`` and
rate ``beta``; increments over disjoint windows are independent.  Transition
matrices between corrosion damage states (CDS) are obtained by averaging the
increment probabilities over the truncated loss density inside the starting
state, so they are exact up to quadrature error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import gammainc, gammaincc, gammaln

from .errors import ValidationError

QUAD_EPSREL = 1e-10
QUAD_EPSABS = 1e-13
MIN_OCCUPANCY = 1e-300


@dataclass(frozen=True)
class GammaProcessParams:
    a: float
    b: float
    beta: float

    def __post_init__(self):
        for name in ("a", "b", "beta"):
            v = float(getattr(self, name))
            if not (np.isfinite(v) and v > 0):
                raise ValidationError(f"gamma process parameter {name} must be positive, got {v}")
            object.__setattr__(self, name, v)

    def mean(self, tau):
        return shape(self, tau) / self.beta

    def std(self, tau):
        return np.sqrt(shape(self, tau)) / self.beta


@dataclass(frozen=True)
class CdsScheme:
    thresholds: tuple

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        if any(t <= 0 or not np.isfinite(t) for t in th):
            raise ValidationError("CDS thresholds must be positive and finite")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ValidationError("CDS thresholds must be strictly increasing")
        object.__setattr__(self, "thresholds", th)

    @property
    def n_cds(self) -> int:
        return len(self.thresholds) + 1

    @property
    def edges(self) -> np.ndarray:
        """``[0, c_1, ..., c_{n-1}, inf]``."""
        return np.concatenate([[0.0], self.thresholds, [np.inf]])

    def classify(self, loss):
        """1-based CDS label; a loss equal to a threshold belongs to the upper state."""
        idx = np.searchsorted(np.asarray(self.thresholds), np.asarray(loss, dtype=float), side="right") + 1
        return int(idx) if np.ndim(loss) == 0 else idx


@dataclass
class CdsTransitionSet:
    """Row-stochastic CDS matrices for steps ``(tau, tau + dt]``, ``tau = 0 .. n-1``."""

    matrices: np.ndarray  # (n_tau, n_cds, n_cds)
    dt: float
    fallback_rows: list = field(default_factory=list)  # (tau, row) pairs

    def __post_init__(self):
        m = np.asarray(self.matrices, dtype=float)
        if m.ndim != 3 or m.shape[1] != m.shape[2]:
            raise ValidationError("matrices must have shape (n_tau, n_cds, n_cds)")
        if np.any(np.abs(m.sum(axis=2) - 1.0) > 1e-8):
            raise ValidationError("CDS transition rows must sum to 1 within 1e-8")
        if np.any(np.tril(m, -1) != 0):
            raise ValidationError("CDS transition matrices must be upper triangular")
        self.matrices = m

    @property
    def n_tau(self) -> int:
        return self.matrices.shape[0]

    @property
    def n_cds(self) -> int:
        return self.matrices.shape[1]

    def __getitem__(self, tau: int) -> np.ndarray:
        return self.matrices[tau]


def shape(params: GammaProcessParams, tau):
    """Shape function ``a * tau**b``."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValidationError("exposure time must be non-negative")
    out = params.a * tau ** params.b
    return float(out) if out.ndim == 0 else out


def _gamma_cdf(alpha, beta, x):
    x = np.asarray(x, dtype=float)
    out = np.where(x > 0, gammainc(alpha, beta * np.where(x > 0, x, 0.0)), 0.0)
    out = np.where(np.isposinf(x), 1.0, out)
    return float(out) if out.ndim == 0 else out


def _gamma_sf(alpha, beta, x):
    x = np.asarray(x, dtype=float)
    out = np.where(x > 0, gammaincc(alpha, beta * np.where(x > 0, x, 0.0)), 1.0)
    out = np.where(np.isposinf(x), 0.0, out)
    return float(out) if out.ndim == 0 else out


def _gamma_logpdf(alpha, beta, x):
    return alpha * np.log(beta) - gammaln(alpha) + (alpha - 1.0) * np.log(x) - beta * x


def marginal_cdf(params: GammaProcessParams, tau: float, x):
    if tau <= 0:
        raise ValidationError("marginal_cdf requires tau > 0")
    return _gamma_cdf(shape(params, tau), params.beta, x)


def increment_cdf(params: GammaProcessParams, tau1: float, tau2: float, x):
    """CDF of ``D(tau2) - D(tau1)``: Gamma(alpha(tau2) - alpha(tau1), beta)."""
    if not tau2 > tau1 >= 0:
        raise ValidationError("increment_cdf requires tau2 > tau1 >= 0")
    d_alpha = shape(params, tau2) - shape(params, tau1)
    return _gamma_cdf(d_alpha, params.beta, x)


def _interval_prob(alpha, beta, lo, hi):
    # pick the tail that avoids cancellation
    if np.isinf(hi):
        return float(_gamma_sf(alpha, beta, lo))
    if lo == 0.0:
        return float(_gamma_cdf(alpha, beta, hi))
    if _gamma_cdf(alpha, beta, lo) > 0.5:
        return float(_gamma_sf(alpha, beta, lo) - _gamma_sf(alpha, beta, hi))
    return float(_gamma_cdf(alpha, beta, hi) - _gamma_cdf(alpha, beta, lo))


def state_occupancy(params: GammaProcessParams, scheme: CdsScheme, tau: float) -> np.ndarray:
    """Probability of each CDS at exposure time ``tau`` (pristine at ``tau = 0``)."""
    if tau < 0:
        raise ValidationError("exposure time must be non-negative")
    occ = np.zeros(scheme.n_cds)
    if tau == 0:
        occ[0] = 1.0
        return occ
    alpha = shape(params, tau)
    edges = scheme.edges
    for l in range(scheme.n_cds):
        occ[l] = _interval_prob(alpha, params.beta, edges[l], edges[l + 1])
    return occ


def _conditional_below(alpha, d_alpha, beta, lo, hi, c, scale):
    """``int_lo^hi f_alpha(x) F_dalpha(c - x) dx`` with the upper limit capped at ``c``.

    ``scale`` is the occupancy of the conditioning state; the absolute
    tolerance is tied to it so tiny states keep relative accuracy.
    """
    upper = min(hi, c)
    if upper <= lo:
        return 0.0

    def integrand(x):
        if x <= 0.0:
            return 0.0
        return np.exp(_gamma_logpdf(alpha, beta, x)) * gammainc(d_alpha, beta * (c - x))

    val, _err = integrate.quad(
        integrand, lo, upper, epsabs=QUAD_EPSABS * scale, epsrel=QUAD_EPSREL, limit=400
    )
    return val


def transition_matrix(
    params: GammaProcessParams, scheme: CdsScheme, tau: float, dt: float = 1.0
) -> tuple[np.ndarray, list[int]]:
    """CDS transition matrix over ``(tau, tau + dt]``.

    Returns the matrix and the list of rows that fell back to the identity
    because the conditioning state has (numerically) zero occupancy.
    """
    if tau < 0 or dt <= 0:
        raise ValidationError("transition_matrix requires tau >= 0 and dt > 0")
    n = scheme.n_cds
    edges = scheme.edges
    beta = params.beta
    P = np.zeros((n, n))
    fallback = []

    d_alpha = shape(params, tau + dt) - shape(params, tau)
    if tau == 0:
        P[0] = state_occupancy(params, scheme, dt)
        for l in range(1, n):
            P[l, l] = 1.0
            fallback.append(l)
        return P, fallback

    alpha = shape(params, tau)
    occ = state_occupancy(params, scheme, tau)
    for l in range(n):
        if occ[l] < MIN_OCCUPANCY:
            P[l, l] = 1.0
            fallback.append(l)
            continue
        lo, hi = edges[l], edges[l + 1]
        # cumulative probability of ending below each threshold c_m, m >= l
        below = [
            _conditional_below(alpha, d_alpha, beta, lo, hi, edges[m + 1], occ[l]) / occ[l]
            for m in range(l, n - 1)
        ]
        cum = np.clip(np.array(below + [1.0]), 0.0, 1.0)
        cum = np.maximum.accumulate(cum)
        P[l, l:] = np.diff(np.concatenate([[0.0], cum]))
    return P, fallback


def build_transition_set(
    params: GammaProcessParams, scheme: CdsScheme, n_tau: int, dt: float = 1.0
) -> CdsTransitionSet:
    mats = np.empty((n_tau, scheme.n_cds, scheme.n_cds))
    flagged = []
    for t in range(n_tau):
        mats[t], rows = transition_matrix(params, scheme, t * dt, dt)
        flagged.extend((t, r) for r in rows)
    return CdsTransitionSet(mats, dt, flagged)


def calibrate_from_moments(mean_T: float, sd_T: float, b: float, T: float) -> GammaProcessParams:
    """Solve ``alpha(T)/beta = mean`` and ``alpha(T)/beta**2 = sd**2``."""
    for name, v in (("mean_T", mean_T), ("sd_T", sd_T), ("b", b), ("T", T)):
        if not (np.isfinite(v) and v > 0):
            raise ValidationError(f"{name} must be positive, got {v}")
    beta = mean_T / sd_T**2
    a = mean_T * beta / T**b
    return GammaProcessParams(a=a, b=b, beta=beta)


def sample_path(
    params: GammaProcessParams,
    horizon: float,
    dt: float,
    rng: np.random.Generator,
    size: int | None = None,
) -> np.ndarray:
    """Cumulative loss at ``0, dt, ..., horizon`` (first entry is 0).

    With ``size`` the result has shape ``(size, n_steps + 1)``.
    """
    n_steps = horizon / dt
    if n_steps < 0 or abs(n_steps - round(n_steps)) > 1e-9:
        raise ValidationError("horizon must be a non-negative multiple of dt")
    n_steps = int(round(n_steps))
    times = np.arange(n_steps + 1) * dt
    d_alpha = np.diff(shape(params, times)) if n_steps else np.zeros(0)
    rows = 1 if size is None else int(size)
    inc = rng.gamma(d_alpha, 1.0 / params.beta, size=(rows, n_steps)) if n_steps else np.zeros((rows, 0))
    path = np.concatenate([np.zeros((rows, 1)), np.cumsum(inc, axis=1)], axis=1)
    return path[0] if size is None else path


def warn_fallback(ts: CdsTransitionSet) -> None:
    interior = [(t, r) for t, r in ts.fallback_rows if t > 0]
    if interior:
        warnings.warn(f"identity fallback used for CDS rows {interior}", RuntimeWarning, stacklevel=2)
