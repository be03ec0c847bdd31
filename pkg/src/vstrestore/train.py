"""Trainable linear denoising kernel optimized through the restoration
pipeline with the bias / residual-noise (BRN) loss

    L = B^2(restored) + lambda_rn * |R_N(FD) - R_N(restored)|

over stacks of co-registered realizations. The kernel acts on the
block-scaled GAT image; gradients are propagated analytically through the
unscaling, the exact unbiased inverse, the affine inverse and the blend,
with the recombination weights held fixed (stop-gradient).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import logging
import math
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import vst
from .errors import ConfigError, MetricError, TrainingDivergence
from .image import ImagePlane, RealizationStack, RegionMask
from .metrics import mnse_decompose
from .noise import AcquisitionModel, dose_value, simulate_fd, simulate_ld
from .phantom import PhantomConfig, generate
from .restore import moment_matching_weight

log = logging.getLogger(__name__)

INF = math.inf


# --------------------------------------------------------------------------
# data types


@dataclass(eq=False)
class ConvKernel:
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
            raise ConfigError(f"kernel must be square with odd side, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ConfigError("kernel weights must be finite")
        self.weights = w

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def delta(cls, k: int = 9) -> "ConvKernel":
        w = np.zeros((k, k))
        w[k // 2, k // 2] = 1.0
        return cls(w)

    def to_text(self) -> str:
        rows = "\n".join(" ".join(repr(float(x)) for x in row) for row in self.weights)
        return f"k={self.k}\n{rows}\n"

    @classmethod
    def from_text(cls, text: str) -> "ConvKernel":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("k="):
            raise ConfigError("kernel file must start with 'k=<n>'")
        try:
            k = int(lines[0][2:])
            rows = [[float(x) for x in ln.split()] for ln in lines[1:]]
        except ValueError as exc:
            raise ConfigError(f"malformed kernel file: {exc}") from exc
        if len(rows) != k or any(len(r) != k for r in rows):
            raise ConfigError(f"kernel file does not hold {k} rows of {k} weights")
        return cls(np.array(rows))

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path):
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read kernel {path}: {exc}") from exc


@dataclass(eq=False)
class Scene:
    """Training/eval unit: LD and FD realizations of one scene plus its truth."""

    ld: RealizationStack
    fd: RealizationStack
    truth: ImagePlane
    mask: RegionMask


@dataclass(frozen=True)
class TrainConfig:
    lambda_rn: float = 0.0
    learning_rate: float = 1e-3
    epochs: int = 100
    realizations_per_scene: int = 5
    kernel_size: int = 9
    gamma: float = 0.5
    seed: int = 0
    unit_dc_gain: bool = True

    def __post_init__(self):
        if not (self.lambda_rn >= 0):
            raise ConfigError("lambda_rn must be >= 0 (inf allowed)")
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be a finite value >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.realizations_per_scene < 2:
            raise ConfigError("realizations_per_scene must be >= 2")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        dose_value(self.gamma)


@dataclass(frozen=True)
class SweepRow:
    lambda_rn: float
    bias_sq: float
    residual_noise: float
    rn_fd: float

    @property
    def rn_mismatch(self) -> float:
        return abs(self.residual_noise - self.rn_fd)


@dataclass
class SweepResult:
    rows: List[SweepRow] = field(default_factory=list)
    kernels: List[ConvKernel] = field(default_factory=list)

    def row(self, lam) -> SweepRow:
        for r in self.rows:
            if r.lambda_rn == lam:
                return r
        raise KeyError(lam)

    def to_csv(self) -> str:
        lines = ["lambda,bias2,rn"]
        for r in self.rows:
            lines.append(f"{_fmt_lambda(r.lambda_rn)},{float(r.bias_sq)!r},{float(r.residual_noise)!r}")
        return "\n".join(lines) + "\n"


def _fmt_lambda(lam):
    return "inf" if math.isinf(lam) else repr(float(lam))


# --------------------------------------------------------------------------
# losses


def brn_loss(restored: RealizationStack, fd: RealizationStack, truth: ImagePlane,
             mask: RegionMask, lambda_rn: float) -> float:
    """Bias plus weighted residual-noise mismatch; ``inf`` keeps only the RN term."""
    if restored.p < 2 or fd.p < 2:
        raise MetricError("BRN loss needs at least two realizations per stack")
    rd = mnse_decompose(restored, truth, mask)
    rn_fd = mnse_decompose(fd, truth, mask).residual_noise
    return _combine(rd.bias_sq, rd.residual_noise, rn_fd, lambda_rn)


def _combine(b2, rn, rn_fd, lambda_rn):
    if math.isinf(lambda_rn):
        return abs(rn_fd - rn)
    if lambda_rn == 0:
        return b2
    return b2 + lambda_rn * abs(rn_fd - rn)


def _loss_and_grad(x, t, p, rn_fd, lambda_rn):
    """BRN loss and its gradient w.r.t. masked restored values ``x`` (p, M).

    Mirrors :func:`vstrestore.metrics.mnse_decompose` term by term.
    """
    M = x.shape[1]
    m = x.mean(axis=0)
    dev = x - m
    var = (dev ** 2).sum(axis=0) / (p - 1)
    rn = float(np.mean(var / t))
    raw = float(np.mean((m - t) ** 2 / t))
    b2_raw = raw - rn / p
    b2 = max(b2_raw, 0.0)

    d_rn = 2.0 * dev / ((p - 1) * M * t)
    if b2_raw > 0:
        d_b2 = 2.0 * (m - t) / (p * M * t) - d_rn / p
    else:
        d_b2 = np.zeros_like(x)
    sign = np.sign(rn - rn_fd)
    if math.isinf(lambda_rn):
        loss, grad = abs(rn_fd - rn), sign * d_rn
    elif lambda_rn == 0:
        loss, grad = b2, np.broadcast_to(d_b2, x.shape)
    else:
        loss = b2 + lambda_rn * abs(rn_fd - rn)
        grad = d_b2 + lambda_rn * sign * d_rn
    return loss, np.asarray(grad), b2, rn


# --------------------------------------------------------------------------
# pipeline forward / backward


@dataclass(eq=False)
class _Prepared:
    """Kernel-independent part of the pipeline for one scene, masked pixels only.

    ``patches[j, m]`` holds the ``k*k`` mirror-padded neighbours of masked
    pixel ``m`` in realization ``j``, ordered so that the kernel output is
    ``patches @ weights.ravel()`` (a true convolution).
    """

    k: int
    z: np.ndarray            # (p, M) raw LD values
    patches: np.ndarray      # (p, M, k*k) block-scaled GAT neighbourhoods
    lo: np.ndarray           # (p, 1)
    span: np.ndarray         # (p, 1)  hi - lo
    sigma_r: object          # reduced electronic std, scalar or (M,)
    alpha: object            # scalar or (M,)
    truth: np.ndarray        # (M,)
    rn_fd: float


def conv_patches(scaled, mask, k):
    """Neighbourhood matrix ``(M, k*k)`` of a 2D image at the masked pixels."""
    r = k // 2
    H, W = scaled.shape
    pad = np.pad(scaled, r, mode="reflect")
    cols = [pad[2 * r - a:2 * r - a + H, 2 * r - b:2 * r - b + W][mask]
            for a in range(k) for b in range(k)]
    return np.stack(cols, axis=-1)


def _prepare(scene: Scene, model: AcquisitionModel, k: int) -> _Prepared:
    if scene.ld.p < 2:
        raise MetricError("each scene needs >= 2 LD realizations")
    mask = scene.mask.flags
    scene.mask.check(scene.ld.shape)
    patches, lo, span = [], [], []
    sigma_r = None
    for plane in scene.ld.planes:
        zr = vst.to_reduced(plane, model)
        v = vst.block_scale(vst.gat_forward(zr))
        patches.append(conv_patches(v.data, mask, k))
        lo.append(v.record[0])
        span.append(v.record[1] - v.record[0])
        sigma_r = zr.sigma_e_reduced
    masked = (lambda a: a[mask] if np.ndim(a) else a)
    rn_fd = mnse_decompose(scene.fd, scene.truth, scene.mask).residual_noise
    return _Prepared(
        k=k, z=np.asarray(scene.ld.data)[:, mask], patches=np.stack(patches),
        lo=np.array(lo)[:, None], span=np.array(span)[:, None],
        sigma_r=masked(sigma_r), alpha=masked(model.alpha),
        truth=scene.truth.data[mask], rn_fd=rn_fd,
    )


def convolve(data, weights):
    """Mirror-edged 2D convolution (the kernel denoiser)."""
    return ndimage.convolve(data, weights, mode="mirror")


def _forward(weights, prep: _Prepared, model, gamma, frozen_w=None):
    """Restored masked values, d(restored)/d(conv output), weights and VST values."""
    alpha = prep.alpha
    d = (prep.patches @ weights.ravel()) * prep.span + prep.lo
    y_hat = alpha * vst.exact_unbiased(d, prep.sigma_r) / gamma
    if frozen_w is None:
        w = moment_matching_weight(y_hat, alpha, model.sigma_e, gamma)
    else:
        w = frozen_w
    z = prep.z
    restored = z + (w - 1.0) * (z - model.tau) + (1.0 - gamma * w) * y_hat
    slope = (1.0 - gamma * w) * (alpha / gamma) * vst.exact_unbiased_derivative(d) * prep.span
    return restored, slope, w, d


@dataclass
class Evaluation:
    loss: float
    grad: Optional[np.ndarray]
    bias_sq: float
    residual_noise: float
    rn_fd: float
    fallback_pixels: int = 0
    weights: list = field(default_factory=list)


def _evaluate(weights, prepared: Sequence[_Prepared], model, gamma, lambda_rn,
              need_grad=True, frozen=None) -> Evaluation:
    k = weights.shape[0]
    if not prepared:
        return Evaluation(0.0, np.zeros((k, k)) if need_grad else None, 0.0, 0.0, 0.0)
    total = 0.0
    b2s, rns, rnfd = [], [], []
    grad = np.zeros(k * k) if need_grad else None
    fallback = 0
    all_w = []
    n = len(prepared)
    for s, prep in enumerate(prepared):
        if prep.k != k:
            raise ConfigError(f"scene prepared for k={prep.k}, kernel has k={k}")
        x, slope, w, d = _forward(weights, prep, model, gamma, None if frozen is None else frozen[s])
        all_w.append(w)
        loss, g_x, b2, rn = _loss_and_grad(x, prep.truth, x.shape[0], prep.rn_fd, lambda_rn)
        total += loss / n
        b2s.append(b2)
        rns.append(rn)
        rnfd.append(prep.rn_fd)
        fallback += int(np.count_nonzero(d <= vst.D_MIN))
        if need_grad:
            grad += np.einsum("pm,pmk->k", g_x * slope, prep.patches) / n
    if fallback:
        log.debug("%d masked pixels fell in the d <= %.4f fallback branch of the unbiased inverse",
                  fallback, vst.D_MIN)
    return Evaluation(total, None if grad is None else grad.reshape(k, k),
                      float(np.mean(b2s)), float(np.mean(rns)), float(np.mean(rnfd)), fallback, all_w)


def _as_prepared(scenes, model, k):
    return [s if isinstance(s, _Prepared) else _prepare(s, model, k) for s in scenes]


def pipeline_gradient(kernel: ConvKernel, scene_batch, model: AcquisitionModel, dose,
                      lambda_rn: float) -> np.ndarray:
    """Exact gradient of the mean per-scene BRN loss w.r.t. the kernel weights."""
    prepared = _as_prepared(scene_batch, model, kernel.k)
    return _evaluate(kernel.weights, prepared, model, dose_value(dose), lambda_rn).grad


def pipeline_loss(kernel: ConvKernel, scene_batch, model: AcquisitionModel, dose, lambda_rn: float,
                  frozen_weights=None) -> float:
    """Mean per-scene BRN loss; ``frozen_weights`` pins the recombination weights.

    Use :func:`recombination_state` to obtain the weights at a reference
    kernel; with them pinned this is the objective whose derivative
    :func:`pipeline_gradient` returns.
    """
    prepared = _as_prepared(scene_batch, model, kernel.k)
    return _evaluate(kernel.weights, prepared, model, dose_value(dose), lambda_rn,
                     need_grad=False, frozen=frozen_weights).loss


def recombination_state(kernel: ConvKernel, scene_batch, model, dose):
    prepared = _as_prepared(scene_batch, model, kernel.k)
    return _evaluate(kernel.weights, prepared, model, dose_value(dose), 0.0, need_grad=False).weights


def restore_stack(kernel: ConvKernel, stack: RealizationStack, model: AcquisitionModel, dose) -> RealizationStack:
    """Apply the kernel pipeline to every realization (no loss needed)."""
    from .restore import apply_kernel, restore_pipeline

    planes = [restore_pipeline(p, model, dose, lambda v: apply_kernel(v, kernel.weights)) for p in stack.planes]
    return RealizationStack.from_planes(planes)


# --------------------------------------------------------------------------
# training


@dataclass
class HistoryRow:
    step: int
    loss: float
    bias_sq: float
    residual_noise: float


def history_csv(history) -> str:
    lines = ["step,loss,bias2,rn"]
    lines += [f"{h.step},{float(h.loss)!r},{float(h.bias_sq)!r},{float(h.residual_noise)!r}" for h in history]
    return "\n".join(lines) + "\n"


def train_filter(config: TrainConfig, dataset, model: AcquisitionModel,
                 init: Optional[ConvKernel] = None):
    """Full-batch gradient descent on the BRN loss from a delta kernel.

    The step size halves after each half of the epochs. Returns the final
    kernel and one history row per evaluated kernel (``epochs + 1`` rows:
    the initial kernel, then after every step).
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    prepared = _as_prepared(dataset, model, config.kernel_size)
    weights = (init or ConvKernel.delta(config.kernel_size)).weights.copy()
    if weights.shape[0] != config.kernel_size:
        raise ConfigError("initial kernel size does not match config.kernel_size")
    lr = config.learning_rate
    half = max(config.epochs // 2, 1)
    history = []
    initial = None
    for step in range(config.epochs + 1):
        ev = _evaluate(weights, prepared, model, config.gamma, config.lambda_rn,
                       need_grad=step < config.epochs)
        history.append(HistoryRow(step, ev.loss, ev.bias_sq, ev.residual_noise))
        if initial is None:
            initial = ev.loss
            # a zero starting loss cannot be exceeded by a factor; only non-finite aborts
            limit = 1e3 * initial if initial > 0 else math.inf
        if not math.isfinite(ev.loss) or ev.loss > limit:
            raise TrainingDivergence(
                f"loss {ev.loss:.6g} at step {step} exceeds 1000x the initial loss {initial:.6g}; "
                f"lower learning_rate (currently {config.learning_rate})")
        if step == config.epochs:
            break
        if step > 0 and step % half == 0:
            lr *= 0.5
        step_dir = ev.grad - ev.grad.mean() if config.unit_dc_gain else ev.grad
        weights = weights - lr * step_dir
    return ConvKernel(weights), history


def evaluate_kernel(kernel: ConvKernel, scenes, model, dose) -> Evaluation:
    prepared = _as_prepared(scenes, model, kernel.k)
    return _evaluate(kernel.weights, prepared, model, dose_value(dose), 0.0, need_grad=False)


def lambda_sweep(lambdas, config: TrainConfig, dataset, model: AcquisitionModel,
                 heldout=None, include_endpoints: bool = False) -> SweepResult:
    """Train one kernel per lambda (shared init) and tabulate held-out B^2 / R_N.

    One row per requested value, sorted by lambda with ``inf`` last;
    duplicates give identical rows. ``include_endpoints`` adds the ``0``
    (bias only) and ``inf`` (noise match only) operating points.
    """
    lambdas = [float(x) for x in lambdas]
    if include_endpoints:
        lambdas += [x for x in (0.0, INF) if x not in lambdas]
    if not lambdas:
        raise ConfigError("lambda sweep needs at least one value")
    if any(not lam >= 0 for lam in lambdas):
        raise ConfigError("lambda values must be >= 0")
    train_prep = _as_prepared(dataset, model, config.kernel_size)
    eval_prep = _as_prepared(heldout, model, config.kernel_size) if heldout is not None else train_prep
    trained = {}
    rows, kernels = [], []
    for lam in sorted(lambdas):
        if lam not in trained:
            kernel, _ = train_filter(replace(config, lambda_rn=lam), train_prep, model)
            ev = _evaluate(kernel.weights, eval_prep, model, config.gamma, 0.0, need_grad=False)
            trained[lam] = (kernel, SweepRow(lam, ev.bias_sq, ev.residual_noise, ev.rn_fd))
        kernel, row = trained[lam]
        rows.append(row)
        kernels.append(kernel)
    return SweepResult(rows, kernels)


# --------------------------------------------------------------------------
# synthetic data


def synthetic_scene(phantom: PhantomConfig, model: AcquisitionModel, gamma: float, p: int,
                    seed: int) -> Scene:
    """Phantom scene with ``p`` LD and ``p`` FD realizations.

    Truth is the expected FD image ``y + tau``. Realization ``j`` uses seed
    ``seed + j`` for LD and ``seed + p + j`` for FD.
    """
    y, mask, _ = generate(phantom)
    ld = RealizationStack.from_planes(simulate_ld(y, model, gamma, seed + j) for j in range(p))
    fd = RealizationStack.from_planes(simulate_fd(y, model, seed + p + j) for j in range(p))
    return Scene(ld, fd, y.like(y.data + model.tau), mask)


def synthetic_dataset(n_scenes: int, phantom: PhantomConfig, model: AcquisitionModel,
                      gamma: float, p: int, seed: int) -> List[Scene]:
    """``n_scenes`` phantoms with seeds ``seed, seed+1, ...`` for their texture."""
    scenes = []
    for s in range(n_scenes):
        cfg = PhantomConfig(**{**phantom.__dict__, "seed": phantom.seed + s})
        scenes.append(synthetic_scene(cfg, model, gamma, p, seed + 2 * p * s))
    return scenes
