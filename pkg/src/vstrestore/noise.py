"""Poisson-Gaussian acquisition model at full and reduced dose.

A full-dose raw projection is modelled per pixel as

    z = alpha * Poisson(y / alpha) + Normal(0, sigma_e**2) + tau

and a reduced-dose one replaces ``y`` by ``gamma * y``. ``y`` is the
noise-free, offset-free signal in DU and ``alpha`` may be a per-pixel map.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from . import rng
from .config import as_float, check_keys
from .errors import ConfigError
from .image import ImagePlane, load_image

ArrayLike = Union[float, np.ndarray]


@dataclass(frozen=True, eq=False)
class AcquisitionModel:
    alpha: ArrayLike = 1.0
    sigma_e: float = 0.0
    tau: float = 0.0
    alpha_map: str | None = None  # provenance only, set by from_config

    def __post_init__(self):
        alpha = self.alpha
        if np.ndim(alpha) == 0:
            alpha = float(alpha)
        else:
            alpha = np.array(alpha, dtype=np.float64)
            if alpha.ndim != 2:
                raise ConfigError("alpha map must be 2D")
            alpha.setflags(write=False)
        if not np.all(np.isfinite(alpha)) or np.any(np.asarray(alpha) <= 0):
            raise ConfigError("alpha must be finite and > 0 everywhere")
        if not (self.sigma_e >= 0 and np.isfinite(self.sigma_e)):
            raise ConfigError("sigma_e must be >= 0")
        if not (self.tau >= 0 and np.isfinite(self.tau)):
            raise ConfigError("tau must be >= 0")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma_e", float(self.sigma_e))
        object.__setattr__(self, "tau", float(self.tau))

    KEYS = ("alpha", "sigma_e", "tau", "alpha_map")

    @classmethod
    def from_config(cls, values, base_dir=None):
        """Build from ``alpha=``, ``sigma_e=``, ``tau=``, optional ``alpha_map=<path>``."""
        values = {k: v for k, v in values.items() if k in cls.KEYS}
        if "alpha_map" in values:
            path = Path(values["alpha_map"])
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            alpha = load_image(path).data
        else:
            alpha = as_float(values, "alpha", 1.0)
        return cls(alpha, as_float(values, "sigma_e", 0.0), as_float(values, "tau", 0.0),
                   values.get("alpha_map"))

    def to_config(self):
        out = {"sigma_e": repr(self.sigma_e), "tau": repr(self.tau)}
        if self.alpha_map is not None:
            out["alpha_map"] = self.alpha_map
        elif np.ndim(self.alpha) == 0:
            out["alpha"] = repr(self.alpha)
        else:
            raise ConfigError("a per-pixel alpha needs an alpha_map path to be serialized")
        return out

    def check_shape(self, shape):
        if np.ndim(self.alpha) and np.shape(self.alpha) != tuple(shape):
            raise ConfigError(f"alpha map shape {np.shape(self.alpha)} does not match image {tuple(shape)}")


@dataclass(frozen=True)
class DoseFactor:
    gamma: float

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError(f"dose factor must satisfy 0 < gamma <= 1, got {self.gamma}")


def dose_value(dose) -> float:
    """Accept a :class:`DoseFactor` or a bare number."""
    if isinstance(dose, DoseFactor):
        return dose.gamma
    return DoseFactor(float(dose)).gamma


def _acquire(y: ImagePlane, model: AcquisitionModel, gamma: float, seed: int) -> ImagePlane:
    if np.any(y.data < 0):
        raise ConfigError("noise-free signal must be non-negative")
    model.check_shape(y.shape)
    stream = rng.PixelStream(seed, rng.ACQUISITION, y.shape)
    lam = gamma * y.data / model.alpha
    counts = rng.poisson_from_uniforms(lam, stream.uniform(0), stream.normal(0, 1))
    electronic = model.sigma_e * stream.normal(2, 3)
    return y.like(model.alpha * counts + electronic + model.tau)


def simulate_fd(y: ImagePlane, model: AcquisitionModel, seed: int) -> ImagePlane:
    """Full-dose raw acquisition of the noise-free signal ``y``."""
    return _acquire(y, model, 1.0, seed)


def simulate_ld(y: ImagePlane, model: AcquisitionModel, dose, seed: int) -> ImagePlane:
    """Reduced-dose acquisition; ``gamma == 1`` reproduces :func:`simulate_fd`."""
    return _acquire(y, model, dose_value(dose), seed)


def injection_variance(z_fd: np.ndarray, model: AcquisitionModel, gamma: float) -> np.ndarray:
    """Variance of the Gaussian noise added when scaling FD data down to ``gamma``."""
    signal = np.maximum(z_fd - model.tau, 0.0)
    return gamma * (1.0 - gamma) * model.alpha * signal + (1.0 - gamma ** 2) * model.sigma_e ** 2


def inject_ld_from_fd(z_fd: ImagePlane, model: AcquisitionModel, dose, seed: int) -> ImagePlane:
    """Emulate a reduced-dose acquisition from a full-dose one.

    The FD signal is scaled by ``gamma`` around the offset and Gaussian
    noise is added so that, for Poisson-Gaussian FD input, the output has
    the mean ``gamma*y + tau`` and variance ``gamma*alpha*y + sigma_e**2``
    of a direct low-dose acquisition.
    """
    gamma = dose_value(dose)
    model.check_shape(z_fd.shape)
    if gamma == 1.0:
        return z_fd.like(z_fd.data)
    stream = rng.PixelStream(seed, rng.INJECTION, z_fd.shape)
    v = injection_variance(z_fd.data, model, gamma)
    noise = np.sqrt(v) * stream.normal(0, 1)
    return z_fd.like(gamma * (z_fd.data - model.tau) + model.tau + noise)


def snr_fd(y, alpha, sigma_e):
    """Full-dose SNR ``y**2 / (y/alpha + sigma_e**2)``, ``alpha`` in quanta per DU."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ConfigError("SNR needs y > 0")
    out = y ** 2 / (y / alpha + sigma_e ** 2)
    return float(out) if out.ndim == 0 else out


def snr_ld(y, alpha, sigma_e, gamma):
    """Low-dose SNR after offset removal and division by ``gamma``."""
    y = np.asarray(y, dtype=np.float64)
    gamma = dose_value(gamma)
    if np.any(y <= 0):
        raise ConfigError("SNR needs y > 0")
    out = y ** 2 / (y / (gamma * alpha) + sigma_e ** 2 / gamma ** 2)
    return float(out) if out.ndim == 0 else out
