"""Weight-similarity analytics, attention-head confidence, and heatmaps.

All arithmetic runs in float64 regardless of storage format so tolerances in
reports and tests mean what they say.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, WeightTensor
from .errors import ShapeMismatchError, UndefinedCorrelationError
from .pgm import write_pgm
from .rng import stream

METRICS = ("abs_diff", "abs_of_abs_diff")

HEATMAP_CEILING = 0.2  # diff value rendered as pure white


@dataclass
class DiffMap:
    values: np.ndarray  # nonnegative float64, same shape as the inputs
    metric: str

    @property
    def dims(self):
        return self.values.shape


@dataclass
class DiffStats:
    mean: float
    max: float
    _values: np.ndarray

    def fraction_below(self, tau: float) -> float:
        return float((self._values < tau).mean())


def _as_f64(t) -> np.ndarray:
    if isinstance(t, WeightTensor):
        t = t.data
    return np.asarray(t, dtype=np.float64)


def weight_diff_map(a, b, metric: str = "abs_diff") -> DiffMap:
    """Elementwise |a−b| or ||a|−|b|| over two same-shape tensors."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    x, y = _as_f64(a), _as_f64(b)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"diff over shapes {x.shape} vs {y.shape}")
    if metric == "abs_diff":
        return DiffMap(np.abs(x - y), metric)
    return DiffMap(np.abs(np.abs(x) - np.abs(y)), metric)


def diff_stats(dmap: DiffMap) -> DiffStats:
    v = dmap.values.reshape(-1)
    if v.size == 0:
        raise ValueError("empty diff map")
    return DiffStats(float(v.mean()), float(v.max()), v)


def stats_csv(pairs, metric: str = "abs_diff") -> str:
    """CSV report over (name, tensorA, tensorB) triples."""
    lines = ["tensor,metric,mean,max,frac_below_0.001,frac_below_0.002"]
    for name, a, b in pairs:
        st = diff_stats(weight_diff_map(a, b, metric))
        lines.append(
            f"{name},{metric},{st.mean!r},{st.max!r},"
            f"{st.fraction_below(0.001)!r},{st.fraction_below(0.002)!r}"
        )
    return "\n".join(lines) + "\n"


def checkpoint_pairs(a: Checkpoint, b: Checkpoint):
    """Match tensors of two checkpoints by name, in a's order."""
    return [(t.name, t, b.tensor(t.name)) for t in a.tensors]


def sign_agreement(a, b) -> float:
    """Fraction of positions whose sign bit matches (zero counts as +)."""
    x, y = _as_f64(a), _as_f64(b)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"sign compare over shapes {x.shape} vs {y.shape}")
    return float(((x < 0) == (y < 0)).mean())


def pearson(x, y) -> float:
    """Plain product-moment correlation with hard zero-variance errors."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"pearson over lengths {x.size} vs {y.size}")
    xd = x - x.mean() if x.size else x
    yd = y - y.mean() if y.size else y
    sx = float(np.sqrt((xd * xd).sum()))
    sy = float(np.sqrt((yd * yd).sum()))
    if x.size < 2 or sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError(
            f"correlation undefined: n={x.size}, spread=({sx}, {sy})"
        )
    r = float((xd * yd).sum() / (sx * sy))
    return max(-1.0, min(1.0, r))


# ---------------------------------------------------------------------------
# toy self-attention

@dataclass
class AttentionHead:
    wq: np.ndarray  # hidden x d_head
    wk: np.ndarray
    wv: np.ndarray
    alpha: float

    def __post_init__(self):
        if not (self.wq.shape == self.wk.shape == self.wv.shape):
            raise ShapeMismatchError("attention head projections disagree in shape")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


def head_of(ckpt_or_tensors, layer: int, head: int, heads: int) -> AttentionHead:
    """Slice one head's column block out of a checkpoint's layer tensors."""
    if isinstance(ckpt_or_tensors, Checkpoint):
        wq = ckpt_or_tensors.tensor(f"enc.{layer:02d}.attn.wq").data
        wk = ckpt_or_tensors.tensor(f"enc.{layer:02d}.attn.wk").data
        wv = ckpt_or_tensors.tensor(f"enc.{layer:02d}.attn.wv").data
    else:
        wq, wk, wv = ckpt_or_tensors
    hidden = wq.shape[0]
    if hidden % heads:
        raise ShapeMismatchError(f"hidden {hidden} not divisible by {heads} heads")
    d = hidden // heads
    sl = slice(head * d, (head + 1) * d)
    return AttentionHead(
        _as_f64(wq[:, sl]), _as_f64(wk[:, sl]), _as_f64(wv[:, sl]),
        alpha=math.sqrt(d),
    )


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention_forward(head: AttentionHead, x: np.ndarray):
    """(Z, P): output tokens and the attention probability matrix."""
    x = _as_f64(x)
    if x.ndim != 2 or x.shape[1] != head.wq.shape[0]:
        raise ShapeMismatchError(
            f"input {x.shape} does not match hidden size {head.wq.shape[0]}"
        )
    q = x @ head.wq
    k = x @ head.wk
    v = x @ head.wv
    p = _softmax_rows((q @ k.T) / head.alpha)
    return p @ v, p


def head_confidence(p: np.ndarray) -> float:
    """Mean over query rows (and any batch axes) of the row maximum."""
    p = np.asarray(p, dtype=np.float64)
    return float(p.max(axis=-1).mean())


def attention_inputs(hidden: int, count: int, tokens: int, seed: int) -> np.ndarray:
    """Deterministic standard-normal input batch, shape (count, tokens, hidden)."""
    g = stream(seed, "attn-inputs").gaussian(count * tokens * hidden)
    return g.reshape(count, tokens, hidden)


def _layer_confidences(ckpt: Checkpoint, layer: int, heads: int,
                       x: np.ndarray, per_query: bool) -> np.ndarray:
    """Confidence samples for every head of one layer.

    Returns (heads, count) — or (heads, count*tokens) with per_query=True.
    """
    wq = _as_f64(ckpt.tensor(f"enc.{layer:02d}.attn.wq").data)
    wk = _as_f64(ckpt.tensor(f"enc.{layer:02d}.attn.wk").data)
    hidden = wq.shape[0]
    d = hidden // heads
    b, t, _ = x.shape
    q = (x @ wq).reshape(b, t, heads, d)
    k = (x @ wk).reshape(b, t, heads, d)
    logits = np.einsum("bihd,bjhd->bhij", q, k) / math.sqrt(d)
    p = _softmax_rows(logits)
    rowmax = p.max(axis=-1)  # (b, heads, tokens)
    if per_query:
        return rowmax.transpose(1, 0, 2).reshape(heads, b * t)
    return rowmax.mean(axis=-1).T  # (heads, b)


def confidence_correlation(model_a: Checkpoint, model_b: Checkpoint,
                           inputs: np.ndarray, heads: int,
                           per_query: bool = False) -> np.ndarray:
    """Pearson r of per-input head confidences, one per (layer, head)."""
    inputs = _as_f64(inputs)
    if inputs.ndim != 3:
        raise ShapeMismatchError("inputs must be (count, tokens, hidden)")
    if inputs.shape[0] < 2 and not per_query:
        raise UndefinedCorrelationError("need at least 2 inputs to correlate")
    layers = sorted(
        int(n.split(".")[1]) for n in model_a.names() if n.endswith(".attn.wq")
    )
    out = np.empty((len(layers), heads), dtype=np.float64)
    for li, layer in enumerate(layers):
        ca = _layer_confidences(model_a, layer, heads, inputs, per_query)
        cb = _layer_confidences(model_b, layer, heads, inputs, per_query)
        for h in range(heads):
            out[li, h] = pearson(ca[h], cb[h])
    return out


# ---------------------------------------------------------------------------
# rendering

def heatmap_render(dmap: DiffMap, out_path, downsample: int = 1) -> None:
    """Grayscale PGM: 0 (black) at diff 0, 255 (white) at diff >= 0.2.

    Downsampling block-means the raw diff values first, then scales; edge
    blocks of a non-divisible shape average over their remainder.
    """
    v = dmap.values
    if v.ndim != 2 or v.size == 0:
        raise ValueError("heatmap wants a non-empty 2-D diff map")
    if downsample < 1:
        raise ValueError("downsample must be >= 1")
    if downsample > 1:
        h, w = v.shape
        hh, ww = -(-h // downsample), -(-w // downsample)
        acc = np.zeros((hh, ww), dtype=np.float64)
        cnt = np.zeros((hh, ww), dtype=np.int64)
        np.add.at(acc, (np.arange(h)[:, None] // downsample,
                        np.arange(w)[None, :] // downsample), v)
        np.add.at(cnt, (np.arange(h)[:, None] // downsample,
                        np.arange(w)[None, :] // downsample), 1)
        v = acc / cnt
    scaled = np.clip(v / HEATMAP_CEILING, 0.0, 1.0)
    write_pgm(np.round(scaled * 255.0).astype(np.uint8), out_path)
