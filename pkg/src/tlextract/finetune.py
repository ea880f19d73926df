"""Synthetic checkpoints: pre-trained bases, fine-tuned variants, and
independently trained look-alikes.

Real fine-tuning barely moves encoder weights, so a fine-tuned checkpoint is
modeled as base + i.i.d. Gaussian deltas (small sigma for encoders, a larger
one for the task head).  Independently trained models share nothing, so they
are a fresh draw from the same magnitude distribution.  The magnitude model
is two-part:

* an exact-count fraction of "small" weights, |w| < 0.001, uniform;
* the rest "large": 0.001 + lognormal, random sign, capped at ``max_abs``.

The lognormal median below is calibrated so that two independent draws sit
at mean |delta| ~ 0.0875, the middle of the target sameness band used by the
verifier; see the derivation in tests/test_finetune.py.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, WeightTensor
from .rng import stream

_HALF_NORMAL_MEAN = math.sqrt(2.0 / math.pi)

# lognormal median m solves 0.81*(0.002/3) + 0.1952*(0.001 + m*e^0.5) = 0.0875
LARGE_MEDIAN = 0.27
LARGE_LOG_SIGMA = 1.0
MAX_ABS_DEFAULT = 26.3

TASK_TENSOR = "task.head.w"
TASK_CLASSES = 2


@dataclass(frozen=True)
class ArchSpec:
    encoder_count: int
    hidden: int
    heads: int
    has_task_layer: bool = True

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")

    @property
    def label(self) -> str:
        if (self.encoder_count, self.hidden) == (12, 768):
            return "base"
        if (self.encoder_count, self.hidden) == (24, 1024):
            return "large"
        return f"enc{self.encoder_count}-h{self.hidden}"

    def tensor_names(self) -> list[str]:
        names = [
            f"enc.{i:02d}.attn.{w}"
            for i in range(self.encoder_count)
            for w in ("wq", "wk", "wv")
        ]
        if self.has_task_layer:
            names.append(TASK_TENSOR)
        return names

    def tensor_shape(self, name: str) -> tuple[int, int]:
        if name == TASK_TENSOR:
            return (self.hidden, TASK_CLASSES)
        return (self.hidden, self.hidden)


ARCH_BASE = ArchSpec(12, 768, 12)
ARCH_LARGE = ArchSpec(24, 1024, 16)
PRESETS = {"base": ARCH_BASE, "large": ARCH_LARGE}


@dataclass
class DeltaModel:
    sigma_encoder: float = 0.001
    sigma_last_layer: float = 0.012
    sign_flip_target: float = 0.01  # max flip fraction among |base| >= 0.01
    small_weight_fraction: float = 0.90
    epochs: list[float] | None = None  # per-epoch encoder mean-|delta| targets

    def __post_init__(self):
        if not 0.0 <= self.small_weight_fraction <= 1.0:
            raise ValueError("small_weight_fraction must be within [0, 1]")
        if not 0.0 <= self.sign_flip_target <= 1.0:
            raise ValueError("sign_flip_target must be within [0, 1]")
        if min(self.sigma_encoder, self.sigma_last_layer) < 0:
            raise ValueError("sigmas must be nonnegative")


def nvidia_style() -> DeltaModel:
    """Same-family variant trained further apart: mean |delta| ~ 0.025."""
    return DeltaModel(sigma_encoder=0.025 / _HALF_NORMAL_MEAN)


def _gen_tensor(name, shape, seed, label, fraction, max_abs):
    n = int(np.prod(shape))
    n_small = int(math.floor(fraction * n))
    out = np.empty(n, dtype=np.float32)

    posn = stream(seed, label, name, "mask").permutation(n)
    small_at, large_at = posn[:n_small], posn[n_small:]

    u = stream(seed, label, name, "smallmag").uniform(n_small)
    small = ((2.0 * u - 1.0) * 0.001).astype(np.float32)
    # float32 rounding can land exactly on the fence; nudge those back in
    fence = np.abs(small.astype(np.float64)) >= 0.001
    small[fence] *= np.float32(0.5)
    out[small_at] = small

    n_large = n - n_small
    g = stream(seed, label, name, "largemag").gaussian(n_large)
    mag = 0.001 + LARGE_MEDIAN * np.exp(LARGE_LOG_SIGMA * g)
    np.minimum(mag, max_abs, out=mag)
    s = stream(seed, label, name, "largesign").uniform(n_large)
    out[large_at] = (np.where(s < 0.5, -1.0, 1.0) * mag).astype(np.float32)
    return out.reshape(shape)


def _gen_checkpoint(arch, seed, fraction, label, metadata, max_abs):
    tensors = [
        WeightTensor(name, _gen_tensor(name, arch.tensor_shape(name), seed,
                                       label, fraction, max_abs))
        for name in arch.tensor_names()
    ]
    md = {
        "vendor": "acme",
        "framework": "eager",
        "arch": arch.label,
        "variant": label,
        "seed": str(seed),
    }
    md.update(metadata or {})
    return Checkpoint(tensors, md)


def gen_base(arch: ArchSpec, seed: int, small_weight_fraction: float = 0.90,
             metadata: dict | None = None,
             max_abs: float = MAX_ABS_DEFAULT) -> Checkpoint:
    """Synthetic pre-trained checkpoint; deterministic in (arch, seed)."""
    if not 0.0 <= small_weight_fraction <= 1.0:
        raise ValueError("small_weight_fraction must be within [0, 1]")
    return _gen_checkpoint(arch, seed, small_weight_fraction, "pretrained",
                           metadata, max_abs)


def gen_independent(arch: ArchSpec, seed: int,
                    small_weight_fraction: float = 0.90,
                    metadata: dict | None = None,
                    max_abs: float = MAX_ABS_DEFAULT,
                    stream_label: str = "independent") -> Checkpoint:
    """A fresh draw from the same magnitude model — a different vendor's
    model of the same architecture, sharing no training history."""
    return _gen_checkpoint(arch, seed, small_weight_fraction, stream_label,
                           metadata, max_abs)


def _tensor_sigma(name: str, dm: DeltaModel) -> float:
    return dm.sigma_last_layer if name == TASK_TENSOR else dm.sigma_encoder


def _drift_gaussian(seed, name, shape):
    return stream(seed, "finetune", name, "drift").gaussian(int(np.prod(shape))).reshape(shape)


def apply_finetune(base: Checkpoint, dm: DeltaModel, seed: int) -> Checkpoint:
    """base + Gaussian deltas.  With an epoch schedule, returns the final
    epoch of finetune_trajectory()."""
    if dm.epochs:
        return finetune_trajectory(base, dm, seed)[-1]
    tensors = []
    for t in base.tensors:
        sigma = _tensor_sigma(t.name, dm)
        if sigma == 0.0:
            tensors.append(WeightTensor(t.name, t.data.copy(), t.format))
            continue
        d = _drift_gaussian(seed, t.name, t.data.shape) * sigma
        tensors.append(WeightTensor(t.name, (t.data.astype(np.float64) + d).astype(np.float32), t.format))
    md = dict(base.metadata)
    md["variant"] = "finetuned"
    md["finetune_seed"] = str(seed)
    return Checkpoint(tensors, md)


def task_layer_schedule(dm: DeltaModel) -> list[float]:
    """Monotone, saturating task-head drift targets matching dm.epochs' length."""
    n = len(dm.epochs or [])
    full = dm.sigma_last_layer * _HALF_NORMAL_MEAN
    return [full * (1.0 - math.exp(-3.0 * (i + 1) / n)) for i in range(n)]


def finetune_trajectory(base: Checkpoint, dm: DeltaModel, seed: int) -> list[Checkpoint]:
    """One checkpoint per epoch.

    Each tensor gets a single fixed Gaussian direction, rescaled per epoch so
    the measured encoder mean |delta| tracks dm.epochs and the task head
    drifts monotonically toward its saturation value.
    """
    if not dm.epochs:
        raise ValueError("DeltaModel.epochs is empty; nothing to schedule")
    drifts = {t.name: _drift_gaussian(seed, t.name, t.data.shape) for t in base.tensors}
    task_targets = task_layer_schedule(dm)
    out = []
    for e, target in enumerate(dm.epochs):
        tensors = []
        for t in base.tensors:
            mean_target = task_targets[e] if t.name == TASK_TENSOR else target
            scale = mean_target / _HALF_NORMAL_MEAN
            d = drifts[t.name] * scale
            tensors.append(WeightTensor(
                t.name, (t.data.astype(np.float64) + d).astype(np.float32), t.format))
        md = dict(base.metadata)
        md["variant"] = "finetuned"
        md["finetune_seed"] = str(seed)
        md["epoch"] = str(e + 1)
        out.append(Checkpoint(tensors, md))
    return out


def rise_fall_schedule(n: int = 30, start: float = 0.0005, peak: float = 0.0015,
                       peak_epoch: int = 9, end: float = 0.00015) -> list[float]:
    """Encoder drift targets that rise to a peak and decay back down."""
    if not 1 <= peak_epoch <= n:
        raise ValueError("peak_epoch out of range")
    sched = []
    for i in range(1, n + 1):
        if i <= peak_epoch:
            f = (i - 1) / max(peak_epoch - 1, 1)
            sched.append(start + (peak - start) * f)
        else:
            f = (i - peak_epoch) / max(n - peak_epoch, 1)
            sched.append(peak * (end / peak) ** f)
    return sched
