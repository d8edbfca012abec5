"""Site hazard curves, annual event probabilities and correlated intensity fields.

Events at a site are treated as Poisson arrivals with total rate equal to the
exceedance frequency at the lowest tabulated intensity.  Conditional on an
event, the intensity follows ``F(im) = 1 - lambda(im) / lambda_max`` with
``lambda`` interpolated linearly in (ln im, ln lambda).  Mass above the last
tabulated intensity is lumped onto ``im_max``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .errors import DecompositionError, ValidationError

JITTER_LADDER = (0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8)


@dataclass(frozen=True)
class HazardCurve:
    im_grid: np.ndarray
    lambda_grid: np.ndarray

    def __post_init__(self):
        im = np.array(self.im_grid, dtype=float)
        lam = np.array(self.lambda_grid, dtype=float)
        if im.ndim != 1 or lam.shape != im.shape:
            raise ValidationError("im_grid and lambda_grid must be 1-D and of equal length")
        if im.size < 2:
            raise ValidationError("a hazard curve needs at least two points")
        if not np.all(np.isfinite(im)) or not np.all(np.isfinite(lam)):
            raise ValidationError("hazard curve values must be finite")
        if np.any(im <= 0) or np.any(np.diff(im) <= 0):
            raise ValidationError("im_grid must be positive and strictly increasing")
        if np.any(lam <= 0):
            raise ValidationError("lambda_grid must be strictly positive")
        if np.any(np.diff(lam) > 0):
            raise ValidationError("lambda_grid must be non-increasing along im_grid")
        im.setflags(write=False)
        lam.setflags(write=False)
        object.__setattr__(self, "im_grid", im)
        object.__setattr__(self, "lambda_grid", lam)

    @property
    def im_min(self) -> float:
        return float(self.im_grid[0])

    @property
    def im_max(self) -> float:
        return float(self.im_grid[-1])

    @property
    def lambda_max(self) -> float:
        return float(self.lambda_grid[0])

    def exceedance_rate(self, im):
        """Annual exceedance frequency at ``im`` (log-log interpolation)."""
        im = np.asarray(im, dtype=float)
        _check_in_grid(self, im)
        log_lam = np.interp(np.log(im), np.log(self.im_grid), np.log(self.lambda_grid))
        return np.exp(log_lam)

    @classmethod
    def from_csv(cls, path) -> "HazardCurve":
        """Read a two-column ``im,lambda`` CSV with a header row."""
        path = Path(path)
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or len(header) < 2:
                raise ValidationError(f"{path}: missing header row")
            try:
                float(header[0])
            except ValueError:
                pass
            else:
                raise ValidationError(f"{path}: first row must be a header, got numbers")
            rows = [r for r in reader if r and any(c.strip() for c in r)]
        try:
            data = np.array([[float(r[0]), float(r[1])] for r in rows])
        except (ValueError, IndexError) as exc:
            raise ValidationError(f"{path}: malformed row ({exc})") from None
        if data.size == 0:
            raise ValidationError(f"{path}: no data rows")
        return cls(data[:, 0], data[:, 1])

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["im", "lambda"])
            for im, lam in zip(self.im_grid, self.lambda_grid):
                writer.writerow([repr(float(im)), repr(float(lam))])


@dataclass(frozen=True)
class SiteLayout:
    site_positions: np.ndarray
    correlation_range_r: float

    def __post_init__(self):
        pos = np.atleast_2d(np.array(self.site_positions, dtype=float))
        if pos.shape[0] < 1 or pos.shape[1] != 2:
            raise ValidationError("site_positions must be an (n_sites, 2) array of planar coordinates")
        if not np.all(np.isfinite(pos)):
            raise ValidationError("site coordinates must be finite")
        r = float(self.correlation_range_r)
        if not (np.isfinite(r) and r > 0):
            raise ValidationError("correlation_range_r must be positive")
        pos.setflags(write=False)
        object.__setattr__(self, "site_positions", pos)
        object.__setattr__(self, "correlation_range_r", r)

    @property
    def n_sites(self) -> int:
        return self.site_positions.shape[0]


@dataclass(frozen=True)
class ImPmf:
    """Discrete intensity distribution, conditional on an event occurring."""

    im_points: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        pts = np.array(self.im_points, dtype=float)
        m = np.array(self.masses, dtype=float)
        if pts.ndim != 1 or m.shape != pts.shape or pts.size == 0:
            raise ValidationError("im_points and masses must be equal-length 1-D arrays")
        if np.any(m < 0):
            raise ValidationError("masses must be non-negative")
        if abs(m.sum() - 1.0) > 1e-12:
            raise ValidationError(f"masses sum to {m.sum()!r}, expected 1")
        if np.any(pts <= 0):
            raise ValidationError("im_points must be positive")
        object.__setattr__(self, "im_points", pts)
        object.__setattr__(self, "masses", m)


def _check_in_grid(curve: HazardCurve, im) -> None:
    im = np.asarray(im, dtype=float)
    # one-ulp slack so geometrically spaced edges computed in log space still land inside
    lo = curve.im_min * (1 - 4e-16)
    hi = curve.im_max * (1 + 4e-16)
    if np.any(~np.isfinite(im)) or np.any(im < lo) or np.any(im > hi):
        raise ValidationError(
            f"intensity outside hazard grid [{curve.im_min}, {curve.im_max}]"
        )


def annual_event_probability(curve: HazardCurve) -> float:
    """Probability of at least one event per year: ``1 - exp(-lambda_max)``."""
    return float(-np.expm1(-curve.lambda_max))


def conditional_im_cdf(curve: HazardCurve, im):
    im_arr = np.asarray(im, dtype=float)
    _check_in_grid(curve, im_arr)
    clipped = np.clip(im_arr, curve.im_min, curve.im_max)
    cdf = 1.0 - curve.exceedance_rate(clipped) / curve.lambda_max
    cdf = np.maximum(cdf, 0.0)
    return float(cdf) if np.ndim(im) == 0 else cdf


def inverse_conditional_im_cdf(curve: HazardCurve, u):
    """Generalised inverse of :func:`conditional_im_cdf`.

    Probabilities beyond ``F(im_max)`` map to ``im_max`` (the lumped tail).
    """
    u_arr = np.asarray(u, dtype=float)
    if np.any((u_arr < 0) | (u_arr > 1)) or np.any(~np.isfinite(u_arr)):
        raise ValidationError("probabilities must lie in [0, 1]")
    log_im = np.log(curve.im_grid)
    log_lam = np.log(curve.lambda_grid)
    with np.errstate(divide="ignore"):
        target = np.log(curve.lambda_max) + np.log1p(-u_arr)
    # first grid index whose rate is at or below the target
    idx = np.searchsorted(-log_lam, -target, side="left")
    out = np.empty_like(u_arr, dtype=float)
    at_min = idx == 0
    beyond = idx >= log_lam.size
    mid = ~(at_min | beyond)
    out[at_min] = curve.im_min
    out[beyond] = curve.im_max
    if np.any(mid):
        hi = idx[mid]
        lo = hi - 1
        frac = (log_lam[lo] - target[mid]) / (log_lam[lo] - log_lam[hi])
        out[mid] = np.exp(log_im[lo] + frac * (log_im[hi] - log_im[lo]))
    return float(out) if np.ndim(u) == 0 else out


def discretize_annual_im(curve: HazardCurve, n_bins: int) -> ImPmf:
    n_bins = int(n_bins)
    if n_bins < 1:
        raise ValidationError("n_bins must be at least 1")
    edges = np.exp(np.linspace(np.log(curve.im_min), np.log(curve.im_max), n_bins + 1))
    edges[0], edges[-1] = curve.im_min, curve.im_max
    cdf = conditional_im_cdf(curve, edges)
    masses = np.diff(cdf)
    masses[-1] += 1.0 - cdf[-1]
    masses = np.maximum(masses, 0.0)
    points = np.sqrt(edges[:-1] * edges[1:])
    return ImPmf(points, masses)


def pairwise_distances(positions: np.ndarray) -> np.ndarray:
    diff = positions[:, None, :] - positions[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def build_correlation_matrix(layout: SiteLayout) -> np.ndarray:
    """Exponential correlation of intra-event residuals, ``exp(-3 d / r)``."""
    d = pairwise_distances(layout.site_positions)
    if not np.all(np.isfinite(d)):
        raise ValidationError("pairwise distances must be finite")
    R = np.exp(-3.0 * d / layout.correlation_range_r)
    np.fill_diagonal(R, 1.0)
    return R


def cholesky_with_jitter(R: np.ndarray) -> np.ndarray:
    n = R.shape[0]
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(R + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            continue
    raise DecompositionError(
        f"correlation matrix is not positive definite (jitter up to {JITTER_LADDER[-1]:g})"
    )


def sample_correlated_field(
    layout: SiteLayout,
    curves: Sequence[HazardCurve],
    rng: np.random.Generator,
    size: int | None = None,
    chol: np.ndarray | None = None,
) -> np.ndarray:
    """Draw event intensities at every site.

    Returns an array of shape ``(n_sites,)``, or ``(size, n_sites)`` when
    ``size`` is given.  Latent standard normals are correlated through the
    Cholesky factor of the site correlation matrix and mapped to each site's
    conditional intensity distribution.
    """
    if len(curves) != layout.n_sites:
        raise ValidationError(f"expected {layout.n_sites} hazard curves, got {len(curves)}")
    L = cholesky_with_jitter(build_correlation_matrix(layout)) if chol is None else chol
    n = layout.n_sites
    z = rng.standard_normal((1 if size is None else int(size), n))
    y = z @ L.T
    u = ndtr(y)
    out = np.empty_like(u)
    for k, curve in enumerate(curves):
        out[:, k] = inverse_conditional_im_cdf(curve, u[:, k])
    return out[0] if size is None else out


def latent_normals(layout: SiteLayout, rng: np.random.Generator, size: int) -> np.ndarray:
    """Correlated standard normals as used by :func:`sample_correlated_field`."""
    L = cholesky_with_jitter(build_correlation_matrix(layout))
    return rng.standard_normal((int(size), layout.n_sites)) @ L.T
