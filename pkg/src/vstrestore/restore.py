"""Denoisers, variance-matching recombination and the restoration pipeline.

The pipeline restores a low-dose acquisition ``z_ld`` as

    reduce -> GAT -> block scale -> denoise -> unscale -> exact unbiased
    inverse -> affine inverse -> weighted recombination with ``z_ld``

so that the result has the mean and variance of a full-dose acquisition.
A denoiser is any callable ``VstImage -> VstImage`` operating on the
block-scaled image; its ``noise_scale`` gives the std of the stabilized
noise in those units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import ndimage

from . import vst
from .errors import ConfigError, PipelineError
from .image import ImagePlane
from .noise import AcquisitionModel, dose_value

MOMENT_MATCHING = "moment_matching"
LITERAL_FORM = "paper_literal"
MODES = (MOMENT_MATCHING, LITERAL_FORM)

Denoiser = Callable[[vst.VstImage], vst.VstImage]


# --------------------------------------------------------------------------
# reference denoisers


def denoise_identity(v: vst.VstImage) -> vst.VstImage:
    return v


def denoise_gaussian(v: vst.VstImage, sigma: float) -> vst.VstImage:
    """Separable Gaussian blur, truncated at 4 sigma, mirror edges."""
    if sigma < 0:
        raise ConfigError("gaussian sigma must be >= 0")
    if sigma == 0:
        return v
    return v.like(ndimage.gaussian_filter(np.asarray(v.data, dtype=np.float64), sigma,
                                          mode="mirror", truncate=4.0))


def _patch_weights(patch_radius):
    x = np.arange(-patch_radius, patch_radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / max(patch_radius / 2.0, 0.5)) ** 2)
    return g / g.sum()


def _separable_valid(a, g):
    """Valid-mode separable correlation of ``a`` with the 1D taps ``g``."""
    n = len(g)
    rows = sum(g[i] * a[i:a.shape[0] - n + 1 + i, :] for i in range(n))
    return sum(g[j] * rows[:, j:rows.shape[1] - n + 1 + j] for j in range(n))


def denoise_nlm(v: vst.VstImage, patch_radius: int = 3, search_radius: int = 10,
                h: float = 1.0) -> vst.VstImage:
    """Classical non-local means.

    Patch distances are Gaussian-weighted mean squared differences over a
    ``(2*patch_radius+1)**2`` patch, weights are ``exp(-dist / h_abs**2)``
    with ``h_abs = h * v.noise_scale`` (``h`` is in units of the stabilized
    noise std), and each pixel's own weight is the largest weight among its
    neighbours. Pixels whose weights all underflow keep their value.
    """
    if patch_radius < 1 or search_radius < 1:
        raise ConfigError("nlm radii must be >= 1")
    if not h > 0:
        raise ConfigError("nlm h must be > 0")
    data = np.asarray(v.data, dtype=np.float64)
    need = 2 * (patch_radius + search_radius) + 1
    if min(data.shape) < need:
        raise ConfigError(f"image {data.shape} smaller than nlm footprint {need}")

    h_abs2 = (h * v.noise_scale) ** 2
    g = _patch_weights(patch_radius)
    P, S = patch_radius, search_radius
    pad = np.pad(data, P + S, mode="reflect")
    H, W = data.shape
    # patch-sized band around the image used for distance computation
    center = pad[S:S + H + 2 * P, S:S + W + 2 * P]

    wsum = np.zeros_like(data)
    wmax = np.zeros_like(data)
    acc = np.zeros_like(data)
    for dy in range(-S, S + 1):
        for dx in range(-S, S + 1):
            if dy == 0 and dx == 0:
                continue
            shifted = pad[S + dy:S + dy + H + 2 * P, S + dx:S + dx + W + 2 * P]
            dist = _separable_valid((center - shifted) ** 2, g)
            w = np.exp(-dist / h_abs2)
            wsum += w
            np.maximum(wmax, w, out=wmax)
            acc += w * shifted[P:P + H, P:P + W]
    total = wsum + wmax
    ok = total > 0
    out = np.where(ok, (acc + wmax * data) / np.where(ok, total, 1.0), data)
    return v.like(out)


def apply_kernel(v: vst.VstImage, weights) -> vst.VstImage:
    """2D convolution with an odd-sized kernel, mirror edges."""
    weights = np.asarray(weights, dtype=np.float64)
    return v.like(ndimage.convolve(np.asarray(v.data, dtype=np.float64), weights, mode="mirror"))


@dataclass
class OracleDenoiser:
    """Returns the VST value whose exact unbiased inverse is the true signal.

    ``truth`` is the noise-free low-dose expectation in DU (including the
    offset), i.e. ``gamma * y + tau``. Used to isolate denoiser error from
    the rest of the pipeline.
    """

    truth: np.ndarray
    model: AcquisitionModel

    def __call__(self, v: vst.VstImage) -> vst.VstImage:
        target = (np.asarray(self.truth) - self.model.tau) / self.model.alpha
        d = vst.exact_unbiased_preimage(target, v.sigma_e_reduced)
        lo, hi = v.record if v.record is not None else (0.0, 1.0)
        return v.like(np.broadcast_to((d - lo) / (hi - lo), np.shape(v.data)))


DENOISERS = ("identity", "gaussian", "nlm", "kernel", "oracle")


def make_denoiser(name: str, **params) -> Denoiser:
    """Build a denoiser from a name and parameters, e.g. ``make_denoiser('nlm', h=1.0)``."""
    if name == "identity":
        if params:
            raise ConfigError(f"identity denoiser takes no parameters: {sorted(params)}")
        return denoise_identity
    if name == "gaussian":
        sigma = float(params.pop("sigma", 1.0))
        if params:
            raise ConfigError(f"unknown gaussian parameters: {sorted(params)}")
        return lambda v: denoise_gaussian(v, sigma)
    if name == "nlm":
        pr = int(params.pop("patch_radius", 3))
        sr = int(params.pop("search_radius", 10))
        h = float(params.pop("h", 1.0))
        if params:
            raise ConfigError(f"unknown nlm parameters: {sorted(params)}")
        return lambda v: denoise_nlm(v, pr, sr, h)
    if name == "kernel":
        weights = params.pop("weights")
        if params:
            raise ConfigError(f"unknown kernel parameters: {sorted(params)}")
        return lambda v: apply_kernel(v, weights)
    if name == "oracle":
        return OracleDenoiser(params.pop("truth"), params.pop("model"))
    raise ConfigError(f"unknown denoiser {name!r}; expected one of {', '.join(DENOISERS)}")


# --------------------------------------------------------------------------
# recombination


@dataclass(frozen=True, eq=False)
class RecombinationWeights:
    w: np.ndarray
    w_bar: np.ndarray
    mode: str = MOMENT_MATCHING


def signal_estimate(y_hat_gamma, model: AcquisitionModel, gamma: float):
    """Full-dose signal estimate ``(y_hat_gamma - tau) / gamma`` (offset-free DU)."""
    return (np.asarray(y_hat_gamma) - model.tau) / gamma


def _weight(y_hat, alpha, noise_term, gamma):
    y = np.maximum(np.asarray(y_hat, dtype=np.float64), 0.0)
    num = alpha * y + noise_term
    # num / (gamma*num + (1-gamma)*s2), written so 1 <= ratio <= 1/gamma holds in floating
    # point; zero signal with zero electronic noise takes the y -> 0 limit
    noise_share = np.where(num > 0, noise_term / np.where(num > 0, num, 1.0), 0.0)
    return np.sqrt(1.0 / (gamma + (1.0 - gamma) * noise_share))


def moment_matching_weight(y_hat, alpha, sigma_e, gamma):
    """``sqrt((alpha*y + s**2) / (gamma*alpha*y + s**2))`` with ``y`` clamped at 0."""
    return _weight(y_hat, alpha, sigma_e ** 2, gamma)


def recombination_weights(y_hat, model: AcquisitionModel, gamma: float,
                          mode: str = MOMENT_MATCHING) -> RecombinationWeights:
    if mode == MOMENT_MATCHING:
        w = moment_matching_weight(y_hat, model.alpha, model.sigma_e, gamma)
        return RecombinationWeights(w, 1.0 - gamma * w, mode)
    if mode == LITERAL_FORM:
        w = _weight(y_hat, model.alpha, model.sigma_e, gamma)
        return RecombinationWeights(w, 1.0 / model.alpha - w, mode)
    raise ConfigError(f"unknown recombination mode {mode!r}")


def _blend(z, y_hat_gamma, y_hat, weights, model, gamma):
    if weights.mode == MOMENT_MATCHING:
        # z + (w - 1)(z - tau) + (1 - gamma w) y_hat, arranged so w == 1 returns z exactly
        return z + (weights.w - 1.0) * (z - model.tau) + weights.w_bar * y_hat
    return weights.w * (z - model.tau) + weights.w_bar * (y_hat_gamma - model.tau) + model.tau


def recombine(z_ld: ImagePlane, y_hat_gamma: ImagePlane, model: AcquisitionModel, dose,
              mode: str = MOMENT_MATCHING) -> ImagePlane:
    """Weighted sum of the noisy LD image and its denoised version.

    In ``moment_matching`` mode the output is
    ``w*(z - tau) + (1 - gamma*w)*y_hat + tau`` with
    ``w = sqrt((alpha*y_hat + s**2) / (gamma*alpha*y_hat + s**2))``; for an
    unbiased ``y_hat`` its mean and variance equal those of a FD image.
    ``paper_literal`` uses ``w_bar = 1/alpha - w`` and an unsquared
    ``sigma_e`` inside ``w``, blended with ``y_hat_gamma``.
    """
    gamma = dose_value(dose)
    if z_ld.shape != y_hat_gamma.shape:
        raise ConfigError("recombine: image shapes differ")
    model.check_shape(z_ld.shape)
    y_hat = signal_estimate(y_hat_gamma.data, model, gamma)
    weights = recombination_weights(y_hat, model, gamma, mode)
    return z_ld.like(_blend(z_ld.data, y_hat_gamma.data, y_hat, weights, model, gamma))


# --------------------------------------------------------------------------
# end-to-end pipeline


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except PipelineError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-tagged with the stage name
        raise PipelineError(name, str(exc)) from exc


def denoise_ld(z_ld: ImagePlane, model: AcquisitionModel, denoiser: Denoiser) -> ImagePlane:
    """VST-domain half of the pipeline: returns the denoised LD estimate in DU."""
    zr = _stage("to_reduced", vst.to_reduced, z_ld, model)
    f = _stage("gat_forward", vst.gat_forward, zr)
    scaled = _stage("block_scale", vst.block_scale, f)
    den = _stage("denoise", denoiser, scaled)
    if np.shape(den.data) != np.shape(scaled.data):
        raise PipelineError("denoise", "denoiser changed the image shape")
    if not np.all(np.isfinite(den.data)):
        raise PipelineError("denoise", "denoiser produced non-finite values")
    if den.record is None:
        den = vst.VstImage(den.data, den.sigma_e_reduced, scaled.record, den.pitch)
    d = _stage("block_unscale", vst.block_unscale, den)
    yr = _stage("inverse_exact_unbiased", vst.inverse_exact_unbiased, d)
    return _stage("from_reduced", vst.from_reduced, yr, model)


def restore_pipeline(z_ld: ImagePlane, model: AcquisitionModel, dose, denoiser: Denoiser,
                     mode: str = MOMENT_MATCHING) -> ImagePlane:
    gamma = dose_value(dose)
    y_hat_gamma = denoise_ld(z_ld, model, denoiser)
    return _stage("recombine", recombine, z_ld, y_hat_gamma, model, gamma, mode)
