"""Image and realization-stack containers, file I/O and stack statistics.

Images are held as 2D ``float64`` arrays indexed ``[row, column]`` so that
``height`` is the first axis. Two on-disk formats are supported:

* ``pgm16``  -- binary PGM (P5), big-endian 16-bit samples, integer DU.
* ``rawf32`` -- headerless little-endian float32, geometry in the sidecar.

Every image file may carry a sidecar ``<file>.meta`` with ``key=value``
lines (``format``, ``width``, ``height``, ``pitch_x``, ``pitch_y``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
import re

import numpy as np

from .config import format_config, parse_lines
from .errors import ConfigError, ImageFormatError, MetricError

DEFAULT_PITCH = 0.14  # mm/pixel
FORMATS = ("pgm16", "rawf32")
PGM_MAX = 65535


@dataclass(frozen=True, eq=False)
class ImagePlane:
    """2D projection in detector units with a physical pixel pitch (mm)."""

    data: np.ndarray
    pitch_x: float = DEFAULT_PITCH
    pitch_y: float = DEFAULT_PITCH

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2 or data.size == 0:
            raise ValueError(f"image data must be a non-empty 2D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image data contains NaN or Inf")
        if not (self.pitch_x > 0 and self.pitch_y > 0):
            raise ValueError("pixel pitch must be positive")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pitch_x", float(self.pitch_x))
        object.__setattr__(self, "pitch_y", float(self.pitch_y))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    @property
    def pitch(self):
        return (self.pitch_x, self.pitch_y)

    def like(self, data) -> "ImagePlane":
        """New plane with the same pitch and different pixel values."""
        return ImagePlane(data, self.pitch_x, self.pitch_y)


@dataclass(frozen=True, eq=False)
class RegionMask:
    flags: np.ndarray

    def __post_init__(self):
        flags = np.array(self.flags, dtype=bool)
        if flags.ndim != 2:
            raise ValueError("mask must be 2D")
        flags.setflags(write=False)
        object.__setattr__(self, "flags", flags)

    @property
    def height(self) -> int:
        return self.flags.shape[0]

    @property
    def width(self) -> int:
        return self.flags.shape[1]

    @property
    def count(self) -> int:
        return int(self.flags.sum())

    @classmethod
    def full(cls, height, width):
        return cls(np.ones((height, width), dtype=bool))

    def check(self, shape):
        """Raise unless this mask gates an image of ``shape`` and is nonempty."""
        if self.flags.shape != tuple(shape):
            raise MetricError(f"mask shape {self.flags.shape} does not match image shape {tuple(shape)}")
        if not self.flags.any():
            raise MetricError("mask selects no pixels")


@dataclass(frozen=True, eq=False)
class RealizationStack:
    """``p`` co-registered noise realizations of one scene.

    Stored as a single ``(p, height, width)`` array; ``planes`` rebuilds the
    individual :class:`ImagePlane` views on demand.
    """

    data: np.ndarray
    pitch_x: float = DEFAULT_PITCH
    pitch_y: float = DEFAULT_PITCH

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[0] < 1 or data.shape[1] < 1 or data.shape[2] < 1:
            raise ValueError(f"stack data must have shape (p>=1, h, w), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("stack data contains NaN or Inf")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_planes(cls, planes):
        planes = list(planes)
        if not planes:
            raise ValueError("a stack needs at least one plane")
        first = planes[0]
        for plane in planes[1:]:
            if plane.shape != first.shape or plane.pitch != first.pitch:
                raise ValueError("all planes of a stack must share dimensions and pitch")
        return cls(np.stack([p.data for p in planes]), first.pitch_x, first.pitch_y)

    @property
    def p(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape[1:]

    @property
    def planes(self):
        return [ImagePlane(d, self.pitch_x, self.pitch_y) for d in self.data]

    def plane_like(self, data) -> ImagePlane:
        return ImagePlane(data, self.pitch_x, self.pitch_y)


# --------------------------------------------------------------------------
# stack statistics


def stack_mean(stack: RealizationStack) -> ImagePlane:
    """Pixel-wise arithmetic mean, summed plane by plane in stack order."""
    total = stack.data[0].copy()
    for plane in stack.data[1:]:
        total += plane
    return stack.plane_like(total / stack.p)


def stack_variance(stack: RealizationStack) -> ImagePlane:
    """Unbiased (divisor ``p - 1``) pixel-wise variance."""
    if stack.p < 2:
        raise MetricError("variance needs at least two realizations")
    mean = stack_mean(stack).data
    acc = np.zeros_like(mean)
    for plane in stack.data:
        acc += (plane - mean) ** 2
    return stack.plane_like(acc / (stack.p - 1))


def pseudo_ground_truth(fd_stack: RealizationStack) -> ImagePlane:
    """Reference image built by averaging full-dose realizations."""
    if fd_stack.p < 2:
        raise MetricError("pseudo-ground-truth needs at least two full-dose realizations")
    return stack_mean(fd_stack)


def affine_match(img: ImagePlane, reference: ImagePlane, mask: RegionMask):
    """Least-squares gain/offset mapping ``img`` onto ``reference`` over ``mask``.

    Returns ``(a * img + b, a, b)``.
    """
    if img.shape != reference.shape:
        raise MetricError("image and reference dimensions differ")
    mask.check(img.shape)
    x = img.data[mask.flags]
    r = reference.data[mask.flags]
    xm = x.mean()
    rm = r.mean()
    dx = x - xm
    sxx = float(np.dot(dx, dx))
    if sxx <= (np.finfo(float).eps * max(abs(xm), 1.0)) ** 2 * x.size:
        raise MetricError("affine match is singular: image is constant over the mask")
    a = float(np.dot(dx, r - rm)) / sxx
    b = float(rm - a * xm)
    return img.like(a * img.data + b), a, b


# --------------------------------------------------------------------------
# file I/O


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def format_from_path(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".pgm":
        return "pgm16"
    if suffix in (".raw", ".f32", ".rawf32"):
        return "rawf32"
    raise ImageFormatError(f"cannot infer image format from extension of {path}")


def _read_meta(path):
    meta = sidecar_path(path)
    if not meta.exists():
        return {}
    try:
        return parse_lines(meta.read_text().splitlines(), source=str(meta))
    except ConfigError as exc:
        raise ImageFormatError(str(exc)) from exc


def _meta_pitch(meta):
    try:
        return float(meta.get("pitch_x", DEFAULT_PITCH)), float(meta.get("pitch_y", DEFAULT_PITCH))
    except ValueError as exc:
        raise ImageFormatError(f"bad pitch in sidecar: {exc}") from exc


_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_pgm(raw, path):
    if not raw.startswith(b"P5"):
        raise ImageFormatError(f"{path}: not a binary PGM (P5) file")
    pos = 2
    values = []
    for _ in range(3):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None:
            raise ImageFormatError(f"{path}: truncated PGM header")
        try:
            values.append(int(m.group(1)))
        except ValueError as exc:
            raise ImageFormatError(f"{path}: malformed PGM header") from exc
        pos = m.end()
    width, height, maxval = values
    if width < 1 or height < 1 or not (0 < maxval <= PGM_MAX):
        raise ImageFormatError(f"{path}: invalid PGM geometry or maxval")
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: malformed PGM header")
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    nbytes = width * height * np.dtype(dtype).itemsize
    payload = raw[pos:]
    if len(payload) != nbytes:
        raise ImageFormatError(
            f"{path}: payload has {len(payload)} bytes, header implies {nbytes}")
    return np.frombuffer(payload, dtype=dtype).reshape(height, width)


def load_image(path, format=None) -> ImagePlane:
    path = Path(path)
    format = format or format_from_path(path)
    if format not in FORMATS:
        raise ImageFormatError(f"unknown image format {format!r}")
    if not path.exists():
        raise ImageFormatError(f"no such image file: {path}")
    meta = _read_meta(path)
    pitch_x, pitch_y = _meta_pitch(meta)
    raw = path.read_bytes()
    if format == "pgm16":
        data = _parse_pgm(raw, path).astype(np.float64)
    else:
        try:
            width, height = int(meta["width"]), int(meta["height"])
        except KeyError as exc:
            raise ImageFormatError(f"{path}: rawf32 needs width and height in its sidecar") from exc
        except ValueError as exc:
            raise ImageFormatError(f"{path}: malformed sidecar geometry") from exc
        if len(raw) != 4 * width * height:
            raise ImageFormatError(
                f"{path}: {len(raw)} bytes is not {width}x{height} float32 samples")
        data = np.frombuffer(raw, dtype="<f4").reshape(height, width).astype(np.float64)
    try:
        return ImagePlane(data, pitch_x, pitch_y)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc


def save_image(plane: ImagePlane, path, format=None) -> None:
    path = Path(path)
    format = format or format_from_path(path)
    if format == "pgm16":
        values = np.rint(plane.data)
        if values.min() < 0 or values.max() > PGM_MAX:
            raise ImageFormatError(
                f"pgm16 needs values in [0, {PGM_MAX}], got [{values.min()}, {values.max()}]")
        header = f"P5\n{plane.width} {plane.height}\n{PGM_MAX}\n".encode("ascii")
        payload = header + values.astype(">u2").tobytes()
    elif format == "rawf32":
        payload = plane.data.astype("<f4").tobytes()
    else:
        raise ImageFormatError(f"unknown image format {format!r}")
    meta = {
        "format": format,
        "width": plane.width,
        "height": plane.height,
        "pitch_x": repr(plane.pitch_x),
        "pitch_y": repr(plane.pitch_y),
    }
    try:
        path.write_bytes(payload)
        sidecar_path(path).write_text(format_config(meta))
    except OSError as exc:
        raise ImageFormatError(f"cannot write {path}: {exc}") from exc


def load_mask(path) -> RegionMask:
    """Masks are stored as images; any nonzero pixel is inside the region."""
    return RegionMask(load_image(path).data != 0)


def save_mask(mask: RegionMask, path, pitch=(DEFAULT_PITCH, DEFAULT_PITCH)) -> None:
    save_image(ImagePlane(mask.flags.astype(np.float64), *pitch), path, "pgm16")


def load_stack(paths) -> RealizationStack:
    return RealizationStack.from_planes(load_image(p) for p in paths)
