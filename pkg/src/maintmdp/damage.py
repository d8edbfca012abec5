"""Park-Ang damage index, seismic damage states and a synthetic response generator.

The response generator stands in for nonlinear time-history analysis.  It draws
lognormal Park-Ang indices whose median grows with intensity, with corrosion
state and with prior seismic damage; its parameters are illustrative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ValidationError

DEFAULT_BETA_PA = 0.1


@dataclass(frozen=True)
class ParkAngInputs:
    delta_m: float
    delta_u: float
    hysteretic_energy: float
    v_y: float
    beta_pa: float = DEFAULT_BETA_PA

    def __post_init__(self):
        if not self.delta_u > 0 or not self.v_y > 0:
            raise ValidationError("delta_u and v_y must be positive")
        if self.beta_pa < 0 or self.delta_m < 0 or self.hysteretic_energy < 0:
            raise ValidationError("beta_pa, delta_m and hysteretic_energy must be non-negative")


def park_ang_index(inputs: ParkAngInputs) -> float:
    """Deformation ratio plus the weighted normalised hysteretic energy."""
    p = inputs
    return p.delta_m / p.delta_u + p.beta_pa * p.hysteretic_energy / (p.v_y * p.delta_u)


@dataclass(frozen=True)
class SdsScheme:
    thresholds: tuple = (0.2, 0.5)

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        if not th or any(t <= 0 or not np.isfinite(t) for t in th):
            raise ValidationError("SDS thresholds must be positive and finite")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ValidationError("SDS thresholds must be strictly increasing")
        object.__setattr__(self, "thresholds", th)

    @property
    def n_sds(self) -> int:
        return len(self.thresholds) + 1


def classify_sds(d_pa, scheme: SdsScheme):
    """1-based seismic damage state; threshold values belong to the upper state."""
    d = np.asarray(d_pa, dtype=float)
    if np.any(d < 0):
        raise ValidationError("Park-Ang index must be non-negative")
    idx = np.searchsorted(np.asarray(scheme.thresholds), d, side="right") + 1
    return int(idx) if np.ndim(d_pa) == 0 else idx


@dataclass(frozen=True)
class SyntheticResponseModel:
    """Lognormal demand model for the Park-Ang index.

    median(im, cds, sds) = median_ref * (im / im_ref)**slope
                           * cds_factors[cds-1] * prior_factors[sds-1]
    """

    median_ref: float
    im_ref: float
    slope: float
    dispersion: float
    cds_factors: tuple
    prior_factors: tuple

    def __post_init__(self):
        if not (self.median_ref > 0 and self.im_ref > 0 and self.slope >= 0):
            raise ValidationError("median_ref and im_ref must be positive, slope non-negative")
        if not self.dispersion >= 0:
            raise ValidationError("dispersion must be non-negative")
        for name in ("cds_factors", "prior_factors"):
            f = tuple(float(x) for x in getattr(self, name))
            if any(x <= 0 for x in f) or any(b < a for a, b in zip(f, f[1:])):
                raise ValidationError(f"{name} must be positive and non-decreasing")
            object.__setattr__(self, name, f)

    def median(self, cds, prior_sds, im):
        cds = np.asarray(cds)
        prior_sds = np.asarray(prior_sds)
        return (
            self.median_ref
            * (np.asarray(im, dtype=float) / self.im_ref) ** self.slope
            * np.asarray(self.cds_factors)[cds - 1]
            * np.asarray(self.prior_factors)[prior_sds - 1]
        )

    def sds_probabilities(self, cds: int, prior_sds: int, im: float, scheme: SdsScheme) -> np.ndarray:
        """Closed-form SDS probabilities implied by the lognormal draw and the floor."""
        med = float(self.median(cds, prior_sds, im))
        edges = np.concatenate([[0.0], scheme.thresholds, [np.inf]])
        if self.dispersion == 0:
            cdf = (med < edges).astype(float)
            cdf[0] = 0.0
            cdf[-1] = 1.0
        else:
            with np.errstate(divide="ignore"):
                cdf = ndtr((np.log(edges) - np.log(med)) / self.dispersion)
        probs = np.diff(cdf)
        floor = prior_sds - 1
        probs[floor] += probs[:floor].sum()
        probs[:floor] = 0.0
        return probs


def generate_response(
    model: SyntheticResponseModel,
    cds,
    prior_sds,
    im,
    rng: np.random.Generator,
    scheme: SdsScheme = SdsScheme(),
):
    """Draw a Park-Ang index that never implies healing below ``prior_sds``.

    Vectorised over array arguments.
    """
    im = np.asarray(im, dtype=float)
    if np.any(im <= 0):
        raise ValidationError("intensity must be positive")
    med = model.median(cds, prior_sds, im)
    shape = np.broadcast(med, np.asarray(prior_sds)).shape
    z = rng.standard_normal(shape)
    d = np.broadcast_to(med, shape) * np.exp(model.dispersion * z)
    floor = np.concatenate([[0.0], scheme.thresholds])[np.asarray(prior_sds) - 1]
    out = np.maximum(d, floor)
    return float(out) if out.ndim == 0 else out
