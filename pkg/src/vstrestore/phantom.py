"""Deterministic synthetic scenes: a half-ellipse "breast" region with smooth
texture and small bright spots, standing in for a physical phantom."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.ndimage import distance_transform_edt

from . import rng
from .config import check_keys
from .errors import ConfigError
from .image import DEFAULT_PITCH, ImagePlane, RegionMask

OUTSIDE_FLOOR = 1.0  # DU outside the region


@dataclass(frozen=True)
class PhantomConfig:
    width: int = 128
    height: int = 128
    background_mean: float = 400.0
    blob_count: int = 12
    blob_scale: float = 10.0       # pixels, std of each bump
    blob_amplitude: float = 0.25   # max relative modulation per bump
    spot_count: int = 3
    spot_amplitude: float = 60.0   # DU added at the spot centre
    spot_radius: float = 1.5       # pixels, Gaussian std
    pitch: float = DEFAULT_PITCH
    seed: int = 0

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ConfigError("phantom must be at least 8x8 pixels")
        if not self.background_mean > 0:
            raise ConfigError("background_mean must be > 0")
        if self.blob_count < 0 or self.spot_count < 0:
            raise ConfigError("blob_count and spot_count must be >= 0")
        if not (self.blob_scale > 0 and self.spot_radius > 0 and self.pitch > 0):
            raise ConfigError("blob_scale, spot_radius and pitch must be > 0")
        if not (np.isfinite(self.spot_amplitude) and np.isfinite(self.blob_amplitude)):
            raise ConfigError("amplitudes must be finite")

    @classmethod
    def from_config(cls, values):
        check_keys(values, [f.name for f in fields(cls)], "phantom")
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                caster = int if f.type in ("int", int) else float
                try:
                    kwargs[f.name] = caster(values[f.name])
                except ValueError as exc:
                    raise ConfigError(f"{f.name}: bad value {values[f.name]!r}") from exc
        return cls(**kwargs)

    def to_config(self):
        return {k: repr(v) if isinstance(v, float) else str(v) for k, v in asdict(self).items()}


def half_ellipse_mask(width, height):
    """Region flush with the left border (chest wall), curved to the right."""
    rows, cols = np.mgrid[0:height, 0:width].astype(np.float64)
    cy = (height - 1) / 2.0
    a = 0.85 * width
    b = 0.46 * height
    return ((cols + 0.5) / a) ** 2 + ((rows - cy) / b) ** 2 <= 1.0


def _gaussian_bump(rows, cols, r0, c0, scale):
    return np.exp(-((rows - r0) ** 2 + (cols - c0) ** 2) / (2.0 * scale ** 2))


def generate(config: PhantomConfig, with_spots: bool = True):
    """Return ``(y, mask, spot_locations)``.

    ``y`` is offset-free noise-free signal in DU, strictly positive; spot
    locations are ``(row, col)`` integer pixel centres inside the mask.
    """
    H, W = config.height, config.width
    flags = half_ellipse_mask(W, H)
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    inside_r, inside_c = np.nonzero(flags)

    n_blob = config.blob_count
    n_spot = config.spot_count
    # one Philox block per random object: (row pick, col jitter, amplitude, spare)
    u = rng.to_open_unit(rng.pixel_words(config.seed, rng.PHANTOM, n_blob + 64 * max(n_spot, 1)))

    log_mod = np.zeros((H, W))
    for k in range(n_blob):
        pick = int(u[k, 0] * inside_r.size)
        amp = config.blob_amplitude * (2.0 * u[k, 1] - 1.0)
        scale = config.blob_scale * (0.5 + u[k, 2])
        log_mod += amp * _gaussian_bump(rows, cols, inside_r[pick], inside_c[pick], scale)
    y = np.where(flags, config.background_mean * np.exp(log_mod), OUTSIDE_FLOOR)

    spots = []
    if with_spots and n_spot:
        margin = 3.0 * config.spot_radius
        separation = 8.0 * config.spot_radius
        # candidate centres keep the whole spot support inside the region
        dist_out = _distance_to_outside(flags)
        ok_r, ok_c = np.nonzero(dist_out > margin)
        if ok_r.size == 0:
            raise ConfigError("spots do not fit inside the mask")
        attempts = u[n_blob:]
        for k in range(attempts.shape[0]):
            pick = int(attempts[k, 3] * ok_r.size)
            cand = (int(ok_r[pick]), int(ok_c[pick]))
            if all((cand[0] - r) ** 2 + (cand[1] - c) ** 2 >= separation ** 2 for r, c in spots):
                spots.append(cand)
                if len(spots) == n_spot:
                    break
        if len(spots) < n_spot:
            raise ConfigError("config too crowded: cannot place all spots inside the mask")
        for r, c in spots:
            y = y + np.where(flags, config.spot_amplitude * _gaussian_bump(rows, cols, r, c, config.spot_radius), 0.0)

    if np.any(y <= 0):
        raise ConfigError("phantom produced a non-positive signal; lower the spot/blob amplitudes")
    pitch = config.pitch
    return ImagePlane(y, pitch, pitch), RegionMask(flags), spots


def _distance_to_outside(flags):
    # the image border counts as outside except along the flush chest-wall edge
    padded = np.pad(flags, 1, constant_values=False)
    padded[1:-1, 0] = flags[:, 0]
    return distance_transform_edt(padded)[1:-1, 1:-1]
