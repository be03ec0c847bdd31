"""Figures of merit: MNSE decomposition and the noise power spectrum.

MNSE is split into residual noise (mean over the mask of the pixel-wise
realization variance divided by the truth) and squared bias (mean of the
squared deviation of the realization mean, divided by the truth, minus
the residual-noise share ``R_N / p`` that the finite sample mean itself
contributes). All values are fractions; multiply by 100 for percentages.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import MetricError
from .image import (ImagePlane, RealizationStack, RegionMask, affine_match,
                    stack_mean, stack_variance)


@dataclass(frozen=True)
class MnseReport:
    bias_sq: float
    residual_noise: float
    mnse: float
    p: int
    pixel_count: int

    def percent(self):
        """``(bias2, rn, mnse)`` as percentages."""
        return 100.0 * self.bias_sq, 100.0 * self.residual_noise, 100.0 * self.mnse


def _truth_over_mask(truth: ImagePlane, mask: RegionMask, shape):
    if truth.shape != tuple(shape):
        raise MetricError("truth and stack dimensions differ")
    mask.check(shape)
    t = truth.data[mask.flags]
    if np.any(t <= 0):
        raise MetricError("truth must be > 0 everywhere inside the mask")
    return t


def residual_noise(stack: RealizationStack, truth: ImagePlane, mask: RegionMask) -> float:
    t = _truth_over_mask(truth, mask, stack.shape)
    return float(np.mean(stack_variance(stack).data[mask.flags] / t))


def mnse_decompose(stack: RealizationStack, truth: ImagePlane, mask: RegionMask) -> MnseReport:
    if stack.p < 2:
        raise MetricError("MNSE decomposition needs p >= 2 realizations")
    t = _truth_over_mask(truth, mask, stack.shape)
    var = stack_variance(stack).data[mask.flags]
    mean = stack_mean(stack).data[mask.flags]
    rn = float(np.mean(var / t))
    raw_bias = float(np.mean((mean - t) ** 2 / t))
    b2 = max(raw_bias - rn / stack.p, 0.0)
    return MnseReport(b2, rn, b2 + rn, stack.p, int(t.size))


def mean_adjust(stack: RealizationStack, truth: ImagePlane, mask: RegionMask) -> RealizationStack:
    """Apply one gain/offset fit (stack mean -> truth) to every realization."""
    _, a, b = affine_match(stack_mean(stack), truth, mask)
    return RealizationStack(a * stack.data + b, stack.pitch_x, stack.pitch_y)


def mean_adjust_then_decompose(stack, truth, mask) -> MnseReport:
    return mnse_decompose(mean_adjust(stack, truth, mask), truth, mask)


# --------------------------------------------------------------------------
# noise power spectrum


@dataclass(frozen=True, eq=False)
class NpsResult:
    grid: np.ndarray        # fftshifted, shape (s_ry, s_rx), mm^2 (or mm^2 / LAS^2)
    freq_x: np.ndarray      # cycles/mm, ascending
    freq_y: np.ndarray
    roi_size: tuple         # (s_rx, s_ry)
    roi_count: int
    pitch: tuple            # (dx, dy) mm
    las: float = 1.0
    radial: tuple = ()

    @property
    def df(self) -> float:
        return 1.0 / (self.roi_size[0] * self.pitch[0])


def hanning_2d(sx, sy):
    """Separable 2D Hann window, shape ``(sy, sx)``."""
    return np.outer(np.hanning(sy), np.hanning(sx))


def roi_origins(length, roi, overlap):
    if not 0 <= overlap < 1:
        raise MetricError("overlap must lie in [0, 1)")
    step = max(int(round(roi * (1.0 - overlap))), 1)
    return list(range(0, length - roi + 1, step))


def nps_2d(stack: RealizationStack, mask: RegionMask, roi_size=64, overlap=0.5,
           compensate_window=True, detrend="mean") -> NpsResult:
    """Window-averaged periodogram of all ROIs lying wholly inside ``mask``.

    Each ROI is (optionally) mean-subtracted, multiplied by a 2D Hann
    window and its squared DFT magnitude accumulated; the sum is scaled by
    ``dx*dy / (n_r * s_rx * s_ry)``. With ``compensate_window`` the result
    is further divided by ``mean(h**2)`` so white noise of variance ``s2``
    gives the level ``s2*dx*dy``.
    """
    if detrend not in ("mean", "none"):
        raise MetricError("detrend must be 'mean' or 'none'")
    sx, sy = (roi_size, roi_size) if np.ndim(roi_size) == 0 else tuple(roi_size)
    H, W = stack.shape
    if sx > W or sy > H:
        raise MetricError(f"ROI {sx}x{sy} larger than image {W}x{H}")
    mask.check(stack.shape)

    # summed-area table: an ROI is valid iff every pixel is inside the mask
    inside = np.pad(mask.flags.astype(np.int64), ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    origins = []
    for r in roi_origins(H, sy, overlap):
        for c in roi_origins(W, sx, overlap):
            n_in = inside[r + sy, c + sx] - inside[r, c + sx] - inside[r + sy, c] + inside[r, c]
            if n_in == sx * sy:
                origins.append((r, c))
    if not origins:
        raise MetricError("no ROI fits wholly inside the mask")

    window = hanning_2d(sx, sy)
    acc = np.zeros((sy, sx))
    for plane in stack.data:
        for r, c in origins:
            roi = plane[r:r + sy, c:c + sx]
            if detrend == "mean":
                roi = roi - roi.mean()
            acc += np.abs(np.fft.fft2(window * roi)) ** 2
    n_r = len(origins) * stack.p
    dx, dy = stack.pitch_x, stack.pitch_y
    grid = acc * (dx * dy / (n_r * sx * sy))
    if compensate_window:
        grid = grid / np.mean(window ** 2)
    result = NpsResult(
        grid=np.fft.fftshift(grid),
        freq_x=np.fft.fftshift(np.fft.fftfreq(sx, d=dx)),
        freq_y=np.fft.fftshift(np.fft.fftfreq(sy, d=dy)),
        roi_size=(sx, sy),
        roi_count=n_r,
        pitch=(dx, dy),
    )
    return replace(result, radial=tuple(radial_profile(result)))


def large_area_signal(reference: ImagePlane, mask: RegionMask) -> float:
    mask.check(reference.shape)
    return float(reference.data[mask.flags].mean())


def nps_normalize(ps: NpsResult, mask: RegionMask, reference: ImagePlane) -> NpsResult:
    """Divide the spectrum by the squared mean signal inside ``mask``."""
    las = large_area_signal(reference, mask)
    if las == 0:
        raise MetricError("large-area signal is zero")
    out = replace(ps, grid=ps.grid / las ** 2, las=las)
    return replace(out, radial=tuple(radial_profile(out)))


def radial_profile(nps: NpsResult):
    """Ring averages ``[(f, value), ...]`` with bins centred on multiples of ``df``.

    Bin ``k`` collects grid cells with radial frequency in
    ``[(k - 1/2) df, (k + 1/2) df)``; empty bins are skipped. Bin 0 is DC.
    """
    grid = np.asarray(nps.grid)
    if grid.size == 0:
        raise MetricError("empty NPS grid")
    fy, fx = np.meshgrid(nps.freq_y, nps.freq_x, indexing="ij")
    radius = np.hypot(fx, fy)
    df = nps.df
    index = np.floor(radius / df + 0.5).astype(np.int64)
    sums = np.bincount(index.ravel(), weights=grid.ravel())
    counts = np.bincount(index.ravel())
    return [(k * df, sums[k] / counts[k]) for k in range(len(counts)) if counts[k]]
