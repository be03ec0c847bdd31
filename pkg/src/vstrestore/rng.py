"""Per-pixel reproducible random streams on top of numpy's Philox4x64.

Philox is counter based: block ``i`` of the stream keyed by ``(seed, stream)``
is a pure function of ``i``. Pixel ``i`` of an image always consumes block
``i`` (four 64-bit words), so any chunking of the pixel range -- serial,
threaded, or split across processes -- produces the same samples.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Philox

WORDS_PER_PIXEL = 4
_MASK64 = (1 << 64) - 1

# stream tags; distinct tags give statistically independent streams
ACQUISITION = 1
INJECTION = 2
PHANTOM = 3
GENERIC = 4


def pixel_words(seed: int, stream: int, count: int, start: int = 0) -> np.ndarray:
    """Raw ``(count, 4)`` uint64 words for pixels ``start .. start + count - 1``."""
    if count < 0 or start < 0:
        raise ValueError("count and start must be non-negative")
    gen = Philox(key=[int(seed) & _MASK64, int(stream) & _MASK64], counter=[int(start), 0, 0, 0])
    return gen.random_raw(WORDS_PER_PIXEL * count).reshape(count, WORDS_PER_PIXEL)


def to_open_unit(words: np.ndarray) -> np.ndarray:
    """Map uint64 words to doubles strictly inside (0, 1) using the top 52 bits.

    52 rather than 53 bits so the largest value ``1 - 2**-53`` is exactly
    representable instead of rounding up to 1.
    """
    return ((words >> np.uint64(12)).astype(np.float64) + 0.5) * 2.0 ** -52


def box_muller(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def poisson_from_uniforms(lam: np.ndarray, u_inv: np.ndarray, normal: np.ndarray,
                          threshold: float = 10.0) -> np.ndarray:
    """Poisson variates from pre-drawn uniforms / normals.

    Means below ``threshold`` use exact CDF inversion of ``u_inv``; larger
    means use the continuity-corrected normal approximation driven by
    ``normal``. Zero means give zero counts.
    """
    lam = np.asarray(lam, dtype=np.float64)
    out = np.empty(lam.shape, dtype=np.float64)
    small = lam < threshold

    big = ~small
    if big.any():
        lb = lam[big]
        out[big] = np.maximum(np.floor(lb + np.sqrt(lb) * normal[big] + 0.5), 0.0)

    if small.any():
        ls = lam[small]
        u = u_inv[small]
        k = np.zeros_like(ls)
        pmf = np.exp(-ls)
        cdf = pmf.copy()
        active = u > cdf
        # the tail beyond lam + 40 has probability far below 2**-53 for lam < 10
        for step in range(1, int(threshold) + 60):
            if not active.any():
                break
            k[active] += 1.0
            pmf = pmf * ls / step
            cdf = cdf + pmf
            active &= u > cdf
        out[small] = k
    return out


class PixelStream:
    """Uniform/normal draws for an image, one Philox block per pixel."""

    def __init__(self, seed: int, stream: int, shape):
        self.shape = tuple(shape)
        n = int(np.prod(self.shape))
        self._u = to_open_unit(pixel_words(seed, stream, n))

    def uniform(self, slot: int) -> np.ndarray:
        return self._u[:, slot].reshape(self.shape)

    def normal(self, slot_a: int, slot_b: int) -> np.ndarray:
        return box_muller(self._u[:, slot_a], self._u[:, slot_b]).reshape(self.shape)
