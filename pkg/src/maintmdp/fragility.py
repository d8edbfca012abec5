"""State-dependent generalised fragility via per-context softmax regression.

For a component in seismic damage state ``i`` and corrosion state ``l`` hit by
intensity ``im``, the next damage state ``j >= i`` has probability

    p(j | i, l, im) = exp(eta_j) / sum_{k >= i} exp(eta_k),
    eta_j = theta0[i, l, j] + theta1[i, l, j] * ln(im),

with ``eta_i = 0`` as the reference category.  State labels are 1-based in the
public API; coefficient arrays are indexed with ``label - 1``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import ValidationError
from .hazard import ImPmf

RIDGE = 1e-6
FORMAT_TAG = "maintmdp-fragility/1"


@dataclass(frozen=True)
class TransitionRecord:
    trajectory: int
    step: int
    prior_sds: int
    posterior_sds: int
    cds: int
    im: float

    def __post_init__(self):
        if self.posterior_sds < self.prior_sds:
            raise ValidationError("seismic damage cannot heal within an event (posterior < prior)")
        if not self.im > 0:
            raise ValidationError("intensity must be positive")


@dataclass
class TransitionData:
    """Columnar transition records (1-based state labels)."""

    trajectory: np.ndarray
    step: np.ndarray
    prior_sds: np.ndarray
    posterior_sds: np.ndarray
    cds: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        self.trajectory = np.asarray(self.trajectory, dtype=np.int64)
        self.step = np.asarray(self.step, dtype=np.int64)
        self.prior_sds = np.asarray(self.prior_sds, dtype=np.int64)
        self.posterior_sds = np.asarray(self.posterior_sds, dtype=np.int64)
        self.cds = np.asarray(self.cds, dtype=np.int64)
        self.im = np.asarray(self.im, dtype=float)
        n = self.im.shape[0]
        for name in ("trajectory", "step", "prior_sds", "posterior_sds", "cds"):
            if getattr(self, name).shape != (n,):
                raise ValidationError("all record columns must have the same length")
        if np.any(self.im <= 0):
            raise ValidationError("intensities must be positive")

    def __len__(self) -> int:
        return self.im.shape[0]

    @classmethod
    def from_records(cls, records: Iterable[TransitionRecord]) -> "TransitionData":
        recs = list(records)
        cols = zip(*[(r.trajectory, r.step, r.prior_sds, r.posterior_sds, r.cds, r.im) for r in recs]) if recs else [()] * 6
        return cls(*[np.array(c) for c in cols])

    @classmethod
    def empty(cls) -> "TransitionData":
        return cls(*[np.zeros(0)] * 6)

    def concat(self, other: "TransitionData") -> "TransitionData":
        return TransitionData(
            *[np.concatenate([getattr(self, f), getattr(other, f)]) for f in _COLUMNS]
        )

    def subset(self, mask) -> "TransitionData":
        return TransitionData(*[getattr(self, f)[mask] for f in _COLUMNS])

    def check(self, n_sds: int, n_cds: int) -> None:
        if len(self) == 0:
            return
        if self.prior_sds.min() < 1 or self.posterior_sds.max() > n_sds or self.prior_sds.max() > n_sds:
            raise ValidationError("SDS labels outside 1..n_sds")
        if self.cds.min() < 1 or self.cds.max() > n_cds:
            raise ValidationError("CDS labels outside 1..n_cds")


_COLUMNS = ("trajectory", "step", "prior_sds", "posterior_sds", "cds", "im")


def _as_data(dataset) -> TransitionData:
    if isinstance(dataset, TransitionData):
        return dataset
    return TransitionData.from_records(dataset)


@dataclass
class FragilityModel:
    n_sds: int
    n_cds: int
    theta0: np.ndarray = None  # (n_sds, n_cds, n_sds)
    theta1: np.ndarray = None
    identity: np.ndarray = None  # (n_sds, n_cds) contexts with no data
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        shape3 = (self.n_sds, self.n_cds, self.n_sds)
        self.theta0 = np.zeros(shape3) if self.theta0 is None else np.array(self.theta0, dtype=float)
        self.theta1 = np.zeros(shape3) if self.theta1 is None else np.array(self.theta1, dtype=float)
        if self.identity is None:
            self.identity = np.zeros((self.n_sds, self.n_cds), dtype=bool)
        self.identity = np.array(self.identity, dtype=bool)
        if self.theta0.shape != shape3 or self.theta1.shape != shape3:
            raise ValidationError(f"coefficient arrays must have shape {shape3}")
        if not (np.all(np.isfinite(self.theta0)) and np.all(np.isfinite(self.theta1))):
            raise ValidationError("fragility coefficients must be finite")
        # reference and impossible categories carry no coefficients
        lower = np.tril(np.ones((self.n_sds, self.n_sds), dtype=bool))[:, None, :]
        lower = np.broadcast_to(lower, shape3)
        if np.any(self.theta0[lower] != 0) or np.any(self.theta1[lower] != 0):
            raise ValidationError("coefficients for j <= i must be identically zero")

    def contexts(self):
        """Non-absorbing ``(i, l)`` contexts, 1-based."""
        return [(i, l) for i in range(1, self.n_sds) for l in range(1, self.n_cds + 1)]


def _context_logits(model: FragilityModel, i: int, l: int, log_im):
    """Logits over candidate states ``j = i .. n_sds`` for an array of ``ln im``."""
    t0 = model.theta0[i - 1, l - 1, i - 1 :]
    t1 = model.theta1[i - 1, l - 1, i - 1 :]
    return t0[None, :] + np.asarray(log_im, dtype=float)[:, None] * t1[None, :]


def transition_prob(model: FragilityModel, i: int, l: int, im):
    """Probability vector over next SDS ``1..n_sds`` (vectorised over ``im``)."""
    if not (1 <= i <= model.n_sds and 1 <= l <= model.n_cds):
        raise ValidationError(f"context ({i}, {l}) outside the state schemes")
    im_arr = np.atleast_1d(np.asarray(im, dtype=float))
    if np.any(im_arr <= 0):
        raise ValidationError("intensity must be positive")
    out = np.zeros((im_arr.size, model.n_sds))
    if i == model.n_sds or model.identity[i - 1, l - 1]:
        out[:, i - 1] = 1.0
    else:
        eta = _context_logits(model, i, l, np.log(im_arr))
        eta -= eta.max(axis=1, keepdims=True)
        w = np.exp(eta)
        out[:, i - 1 :] = w / w.sum(axis=1, keepdims=True)
    return out[0] if np.ndim(im) == 0 else out


def transition_table(model: FragilityModel, im_points) -> np.ndarray:
    """``table[i-1, l-1, k, j-1]`` for every context and intensity point."""
    im_points = np.asarray(im_points, dtype=float)
    out = np.zeros((model.n_sds, model.n_cds, im_points.size, model.n_sds))
    for i in range(1, model.n_sds + 1):
        for l in range(1, model.n_cds + 1):
            out[i - 1, l - 1] = transition_prob(model, i, l, im_points)
    return out


def _record_logprob(model: FragilityModel, data: TransitionData) -> np.ndarray:
    logp = np.full(len(data), -np.inf)
    log_im = np.log(data.im)
    for i in range(1, model.n_sds + 1):
        for l in range(1, model.n_cds + 1):
            sel = (data.prior_sds == i) & (data.cds == l)
            if not np.any(sel):
                continue
            j = data.posterior_sds[sel]
            ok = j >= i
            lp = np.full(j.shape, -np.inf)
            if i == model.n_sds or model.identity[i - 1, l - 1]:
                lp[j == i] = 0.0
            else:
                eta = _context_logits(model, i, l, log_im[sel])
                lse = logsumexp(eta, axis=1)
                rows = np.nonzero(ok)[0]
                lp[rows] = eta[rows, j[rows] - i] - lse[rows]
            logp[sel] = lp
    return logp


def log_likelihood(model: FragilityModel, dataset) -> float:
    data = _as_data(dataset)
    if len(data) == 0:
        return 0.0
    data.check(model.n_sds, model.n_cds)
    logp = _record_logprob(model, data)
    if np.any(np.isneginf(logp)):
        bad = np.nonzero(np.isneginf(logp))[0]
        warnings.warn(
            f"{bad.size} record(s) have zero model probability (first index {bad[0]})",
            RuntimeWarning,
            stacklevel=2,
        )
        return -np.inf
    return float(np.sum(logp))


def log_likelihood_gradient(model: FragilityModel, dataset) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`log_likelihood` w.r.t. ``theta0`` and ``theta1``.

    Entries for reference/impossible categories and identity contexts are zero.
    """
    data = _as_data(dataset)
    g0 = np.zeros_like(model.theta0)
    g1 = np.zeros_like(model.theta1)
    if len(data) == 0:
        return g0, g1
    log_im = np.log(data.im)
    for i, l in model.contexts():
        if model.identity[i - 1, l - 1]:
            continue
        sel = (data.prior_sds == i) & (data.cds == l)
        if not np.any(sel):
            continue
        x = log_im[sel]
        eta = _context_logits(model, i, l, x)
        p = np.exp(eta - logsumexp(eta, axis=1, keepdims=True))
        onehot = np.zeros_like(p)
        onehot[np.arange(p.shape[0]), data.posterior_sds[sel] - i] = 1.0
        resid = onehot - p
        g0[i - 1, l - 1, i:] = resid[:, 1:].sum(axis=0)
        g1[i - 1, l - 1, i:] = (resid[:, 1:] * x[:, None]).sum(axis=0)
    return g0, g1


@dataclass(frozen=True)
class FitOptions:
    ridge: float = RIDGE
    grad_tol: float = 1e-8
    max_iter: int = 200
    min_records: int = 1


def _fit_context(x: np.ndarray, y: np.ndarray, n_cat: int, opts: FitOptions):
    """Penalised Newton fit of a multinomial logit with features (1, x).

    Objective: mean negative log-likelihood + ridge * ||theta||^2.
    Returns (theta[n_cat-1, 2], iterations, grad_inf_norm, converged).
    """
    n = x.size
    X = np.column_stack([np.ones(n), x])
    Y = np.zeros((n, n_cat))
    Y[np.arange(n), y] = 1.0
    m = n_cat - 1
    theta = np.zeros((m, 2))

    def objective(th):
        eta = np.concatenate([np.zeros((n, 1)), X @ th.T], axis=1)
        lse = logsumexp(eta, axis=1)
        nll = np.sum(lse - eta[np.arange(n), y]) / n
        return nll + opts.ridge * np.sum(th * th), eta, lse

    f, eta, lse = objective(theta)
    converged = False
    it = 0
    gnorm = np.inf
    for it in range(1, opts.max_iter + 1):
        p = np.exp(eta - lse[:, None])[:, 1:]
        r = p - Y[:, 1:]
        grad = (r.T @ X) / n + 2 * opts.ridge * theta
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < opts.grad_tol:
            converged = True
            break
        # Hessian of the mean NLL: sum_n (diag(p) - p p^T) kron x x^T / n
        H = np.zeros((m * 2, m * 2))
        for a in range(m):
            for b in range(m):
                w = p[:, a] * ((a == b) - p[:, b])
                H[a * 2 : a * 2 + 2, b * 2 : b * 2 + 2] = (X * w[:, None]).T @ X / n
        H += 2 * opts.ridge * np.eye(m * 2)
        step = np.linalg.solve(H, grad.reshape(-1)).reshape(m, 2)
        t = 1.0
        while True:
            cand = theta - t * step
            f_new, eta_new, lse_new = objective(cand)
            if f_new <= f - 1e-4 * t * np.sum(grad * step) or t < 1e-10:
                break
            t *= 0.5
        if t < 1e-10 and f_new > f:
            break
        theta, f, eta, lse = cand, f_new, eta_new, lse_new
    else:
        p = np.exp(eta - lse[:, None])[:, 1:]
        grad = ((p - Y[:, 1:]).T @ X) / n + 2 * opts.ridge * theta
        gnorm = float(np.max(np.abs(grad)))
        converged = gnorm < opts.grad_tol
    return theta, it, gnorm, converged


def fit_mle(dataset, n_sds: int, n_cds: int, options: FitOptions | None = None) -> FragilityModel:
    """Maximum-likelihood fit, one independent problem per ``(i, l)`` context.

    Contexts with fewer than ``options.min_records`` records keep the identity
    row and are flagged in ``model.diagnostics``.
    """
    opts = options or FitOptions()
    data = _as_data(dataset)
    data.check(n_sds, n_cds)
    if np.any(data.posterior_sds < data.prior_sds):
        raise ValidationError("dataset contains healing transitions")
    model = FragilityModel(n_sds, n_cds)
    log_im = np.log(data.im) if len(data) else np.zeros(0)
    diag = {}
    for i, l in model.contexts():
        sel = (data.prior_sds == i) & (data.cds == l)
        n_rec = int(np.count_nonzero(sel))
        key = f"{i},{l}"
        if n_rec < opts.min_records:
            model.identity[i - 1, l - 1] = True
            diag[key] = {"status": "no_data", "n_records": n_rec}
            continue
        n_cat = n_sds - i + 1
        y = data.posterior_sds[sel] - i
        theta, iters, gnorm, ok = _fit_context(log_im[sel], y, n_cat, opts)
        model.theta0[i - 1, l - 1, i:] = theta[:, 0]
        model.theta1[i - 1, l - 1, i:] = theta[:, 1]
        counts = np.bincount(y, minlength=n_cat)
        diag[key] = {
            "status": "converged" if ok else "not_converged",
            "n_records": n_rec,
            "iterations": int(iters),
            "grad_inf_norm": gnorm,
            "counts": {str(i + c): int(k) for c, k in enumerate(counts)},
        }
        if not ok:
            warnings.warn(f"fragility context {key} did not converge (|grad|={gnorm:.3g})", RuntimeWarning, stacklevel=2)
    model.diagnostics = diag
    return model


def marginalize_over_hazard(model: FragilityModel, pmf: ImPmf, p_event: float) -> np.ndarray:
    """Annual SDS kernel ``K[l-1, i-1, j-1]`` mixing no-event and event years."""
    if not 0.0 <= p_event <= 1.0:
        raise ValidationError("p_event must lie in [0, 1]")
    table = transition_table(model, pmf.im_points)  # (i, l, k, j)
    event = np.einsum("ilkj,k->lij", table, pmf.masses)
    eye = np.eye(model.n_sds)[None, :, :]
    K = (1.0 - p_event) * eye + p_event * event
    return K


def save_model(model: FragilityModel, path) -> None:
    contexts = []
    for i, l in model.contexts():
        entry = {"i": i, "l": l, "identity": bool(model.identity[i - 1, l - 1]), "coefficients": []}
        for j in range(i + 1, model.n_sds + 1):
            entry["coefficients"].append(
                {
                    "j": j,
                    "theta0": float(model.theta0[i - 1, l - 1, j - 1]),
                    "theta1": float(model.theta1[i - 1, l - 1, j - 1]),
                }
            )
        contexts.append(entry)
    doc = {
        "format": FORMAT_TAG,
        "n_sds": model.n_sds,
        "n_cds": model.n_cds,
        "features": ["1", "ln(im)"],
        "contexts": contexts,
        "diagnostics": model.diagnostics,
    }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_model(path) -> FragilityModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != FORMAT_TAG:
        raise ValidationError(f"{path}: not a fragility model file")
    model = FragilityModel(int(doc["n_sds"]), int(doc["n_cds"]))
    for ctx in doc["contexts"]:
        i, l = int(ctx["i"]), int(ctx["l"])
        model.identity[i - 1, l - 1] = bool(ctx.get("identity", False))
        for c in ctx["coefficients"]:
            j = int(c["j"])
            if j <= i:
                raise ValidationError(f"{path}: coefficient for reference category j={j} in context ({i},{l})")
            model.theta0[i - 1, l - 1, j - 1] = float(c["theta0"])
            model.theta1[i - 1, l - 1, j - 1] = float(c["theta1"])
    model.diagnostics = doc.get("diagnostics", {})
    FragilityModel(model.n_sds, model.n_cds, model.theta0, model.theta1, model.identity)
    return model


def model_from_coefficients(n_sds: int, n_cds: int, coefs: Sequence) -> FragilityModel:
    """Build a model from ``(i, l, j, theta0, theta1)`` tuples."""
    model = FragilityModel(n_sds, n_cds)
    for i, l, j, t0, t1 in coefs:
        if j <= i:
            raise ValidationError("only categories above the prior state carry coefficients")
        model.theta0[i - 1, l - 1, j - 1] = t0
        model.theta1[i - 1, l - 1, j - 1] = t1
    return model
