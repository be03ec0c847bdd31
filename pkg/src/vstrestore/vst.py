"""Variance stabilization: affine reduction, generalized Anscombe transform
(GAT), block scaling and the three inverses.

The reduced image ``zr = (z - tau) / alpha`` carries an electronic noise
std of ``sigma_e / alpha``; the GAT then maps Poisson-Gaussian data to
approximately unit-variance Gaussian data.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import PipelineError
from .image import DEFAULT_PITCH, ImagePlane
from .noise import AcquisitionModel

SQRT_3_2 = np.sqrt(1.5)
# Below this the closed-form unbiased inverse turns non-monotone; at this
# point it meets the algebraic inverse (both equal -sigma**2).
D_MIN = 2.0 * np.sqrt(3.0 / 8.0)


@dataclass(frozen=True, eq=False)
class ReducedImage:
    data: np.ndarray
    sigma_e_reduced: object  # float or per-pixel array
    pitch: Tuple[float, float] = (DEFAULT_PITCH, DEFAULT_PITCH)

    def __post_init__(self):
        if np.any(np.asarray(self.sigma_e_reduced) < 0):
            raise ValueError("reduced electronic noise must be >= 0")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("reduced image contains NaN or Inf")

    def like(self, data):
        return ReducedImage(data, self.sigma_e_reduced, self.pitch)


@dataclass(frozen=True, eq=False)
class VstImage:
    """GAT-domain data; ``record`` holds ``(min, max)`` once block-scaled."""

    data: np.ndarray
    sigma_e_reduced: object
    record: Optional[Tuple[float, float]] = None
    pitch: Tuple[float, float] = (DEFAULT_PITCH, DEFAULT_PITCH)

    def like(self, data):
        return VstImage(np.asarray(data, dtype=np.float64), self.sigma_e_reduced, self.record, self.pitch)

    @property
    def noise_scale(self) -> float:
        """Std of stabilized (unit-variance) noise in the units of ``data``."""
        if self.record is None:
            return 1.0
        lo, hi = self.record
        return 1.0 / (hi - lo)


def to_reduced(z: ImagePlane, model: AcquisitionModel) -> ReducedImage:
    model.check_shape(z.shape)
    return ReducedImage((z.data - model.tau) / model.alpha, model.sigma_e / model.alpha, z.pitch)


def from_reduced(zr: ReducedImage, model: AcquisitionModel) -> ImagePlane:
    return ImagePlane(zr.data * model.alpha + model.tau, *zr.pitch)


def _radicand(zr, s2):
    return zr + 0.375 + s2


def gat_forward(zr: ReducedImage) -> VstImage:
    """``2*sqrt(zr + 3/8 + s**2)`` above ``-3/8 - s**2``, zero at or below it."""
    s2 = np.asarray(zr.sigma_e_reduced, dtype=np.float64) ** 2
    rad = _radicand(np.asarray(zr.data, dtype=np.float64), s2)
    out = np.where(rad > 0, 2.0 * np.sqrt(np.maximum(rad, 0.0)), 0.0)
    return VstImage(out, zr.sigma_e_reduced, None, zr.pitch)


def gat_derivative(zr_data, sigma_e_reduced):
    """Pointwise derivative of the GAT (zero on the clamped branch)."""
    rad = _radicand(np.asarray(zr_data, dtype=np.float64), np.asarray(sigma_e_reduced) ** 2)
    safe = np.where(rad > 0, rad, 1.0)
    return np.where(rad > 0, safe ** -0.5, 0.0)


def _algebraic(d, s2):
    return (d / 2.0) ** 2 - 0.375 - s2


def inverse_algebraic(v: VstImage) -> ReducedImage:
    s2 = np.asarray(v.sigma_e_reduced, dtype=np.float64) ** 2
    return ReducedImage(_algebraic(np.asarray(v.data, dtype=np.float64), s2), v.sigma_e_reduced, v.pitch)


def inverse_asymptotic(v: VstImage) -> ReducedImage:
    """Asymptotically unbiased inverse ``d**2/4 - 1/8 - s**2``."""
    s2 = np.asarray(v.sigma_e_reduced, dtype=np.float64) ** 2
    d = np.asarray(v.data, dtype=np.float64)
    return ReducedImage((d / 2.0) ** 2 - 0.125 - s2, v.sigma_e_reduced, v.pitch)


def exact_unbiased(d, sigma_e_reduced):
    """Closed-form exact unbiased inverse on raw arrays.

    Uses the algebraic inverse for ``d <= D_MIN``; the two branches agree
    at ``D_MIN`` so the result is continuous and non-decreasing.
    """
    d = np.asarray(d, dtype=np.float64)
    s2 = np.asarray(sigma_e_reduced, dtype=np.float64) ** 2
    safe = np.where(d > D_MIN, d, 1.0)
    inv = 1.0 / safe
    closed = (0.25 * safe ** 2 + 0.25 * SQRT_3_2 * inv - 1.375 * inv ** 2
              + 0.625 * SQRT_3_2 * inv ** 3 - 0.125 - s2)
    return np.where(d > D_MIN, closed, _algebraic(d, s2))


def exact_unbiased_derivative(d):
    """Derivative of :func:`exact_unbiased` with respect to ``d``."""
    d = np.asarray(d, dtype=np.float64)
    safe = np.where(d > D_MIN, d, 1.0)
    inv = 1.0 / safe
    closed = (0.5 * safe - 0.25 * SQRT_3_2 * inv ** 2 + 2.75 * inv ** 3
              - 1.875 * SQRT_3_2 * inv ** 4)
    return np.where(d > D_MIN, closed, d / 2.0)


def exact_unbiased_preimage(target, sigma_e_reduced, iterations=80):
    """Solve ``exact_unbiased(d) == target`` for ``d >= 0`` by bisection.

    Targets below the range (``< -3/8 - s**2``) map to ``d = 0``.
    """
    target = np.asarray(target, dtype=np.float64)
    s2 = np.asarray(sigma_e_reduced, dtype=np.float64) ** 2
    lo = np.zeros(np.broadcast(target, s2).shape)
    # exact_unbiased(d) >= d**2/4 - 3/8 - s2 for d > 0 gives an upper bracket
    hi = 2.0 * np.sqrt(np.maximum(target + 0.375 + s2, 0.0)) + 2.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        below = exact_unbiased(mid, sigma_e_reduced) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def inverse_exact_unbiased(v: VstImage) -> ReducedImage:
    return ReducedImage(exact_unbiased(v.data, v.sigma_e_reduced), v.sigma_e_reduced, v.pitch)


def block_scale(v: VstImage) -> VstImage:
    """Map VST-domain data linearly onto [0, 1], keeping ``(min, max)``."""
    lo = float(np.min(v.data))
    hi = float(np.max(v.data))
    if not hi > lo:
        raise PipelineError("block_scale", "constant image cannot be scaled to [0, 1]")
    return VstImage((np.asarray(v.data) - lo) / (hi - lo), v.sigma_e_reduced, (lo, hi), v.pitch)


def block_unscale(v: VstImage) -> VstImage:
    if v.record is None:
        raise PipelineError("block_unscale", "image carries no scaling record")
    lo, hi = v.record
    return VstImage(np.asarray(v.data) * (hi - lo) + lo, v.sigma_e_reduced, None, v.pitch)
