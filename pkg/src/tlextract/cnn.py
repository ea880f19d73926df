"""Convolutional classifier over rasterized trace images.

Architecture (valid/unpadded convolutions, floor-division pooling):

    input 3 x 1024 x 1024 (grayscale replicated to three channels)
    conv 3->6, 5x5   -> 6 x 1020 x 1020, rectified
    maxpool 8x8 s8   -> 6 x 127 x 127
    conv 6->16, 5x5  -> 16 x 123 x 123, rectified
    maxpool 8x8 s8   -> 16 x 15 x 15   (= 3600 flat)
    fc 3600 -> 120, rectified
    fc 120 -> 84, rectified
    fc 84 -> C (class logits)

Because the three input channels are identical copies, the first
convolution folds its kernels across channels (summing them) and runs
sparsely over the black pixels only; gradients are replicated back to the
per-channel kernels, which is exact for replicated input.  Training is
plain minibatch SGD with momentum on the softmax cross-entropy, float32
forward/backward with float64 parameter and momentum state, fully
deterministic for a given seed and backend.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .checkpoint import Checkpoint, WeightTensor, read_wbin, write_wbin
from .errors import ToolkitError
from .raster import SIDE, TraceImage
from .rng import stream

KERNEL = 5
POOL = 8
CONV1_OUT = SIDE - KERNEL + 1                      # 1020
POOL1_OUT = (CONV1_OUT - POOL) // POOL + 1         # 127
CONV2_OUT = POOL1_OUT - KERNEL + 1                 # 123
POOL2_OUT = (CONV2_OUT - POOL) // POOL + 1         # 15
C1, C2 = 6, 16
FLAT = C2 * POOL2_OUT * POOL2_OUT                  # 3600
FC1, FC2 = 120, 84

#: Tensor layout in declaration order; None stands for the class count.
LAYOUT = (
    ("conv1.w", (C1, 3, KERNEL, KERNEL)),
    ("conv1.b", (C1,)),
    ("conv2.w", (C2, C1, KERNEL, KERNEL)),
    ("conv2.b", (C2,)),
    ("fc1.w", (FC1, FLAT)),
    ("fc1.b", (FC1,)),
    ("fc2.w", (FC2, FC1)),
    ("fc2.b", (FC2,)),
    ("fc3.w", (None, FC2)),
    ("fc3.b", (None,)),
)


def _class_key(label: str):
    """Sort numeric labels numerically, everything else lexically."""
    return (0, int(label), "") if label.isdigit() else (1, 0, label)


@dataclass
class Hyper:
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 30
    val_fraction: float = 0.1
    stop_at_val_accuracy: float = 1.0
    track_train_loss: bool = False


@dataclass
class CnnModel:
    task: str
    classes: list[str]
    params: dict[str, np.ndarray]  # float64, keyed per LAYOUT
    history: list[dict] = field(default_factory=list)
    selected_epoch: int | None = None

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def class_index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise ToolkitError(f"label {label!r} not among model classes "
                               f"{self.classes}", code="unknown-label")


def tensor_shapes(n_classes: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(name, tuple(n_classes if d is None else d for d in shape))
            for name, shape in LAYOUT]


def init_model(task: str, classes: list[str], seed: int,
               bias_scale: float = 0.0) -> CnnModel:
    """He-initialized weights, zero (or small random) biases."""
    if len(classes) < 2:
        raise ToolkitError(
            f"training needs at least two classes, got {classes!r}",
            code="single-class")
    params: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(len(classes)):
        s = stream(seed, "init", name)
        if name.endswith(".b"):
            if bias_scale > 0:
                params[name] = bias_scale * s.gaussian(shape[0])
            else:
                params[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = int(np.prod(shape[1:]))
            scale = math.sqrt(2.0 / fan_in)
            params[name] = scale * s.gaussian(int(np.prod(shape))).reshape(shape)
    return CnnModel(task=task, classes=list(classes), params=params)


# ---------------------------------------------------------------------------
# forward / backward


def _cast_params(params: dict, dtype) -> dict:
    return {k: np.ascontiguousarray(v, dtype=dtype) for k, v in params.items()}


def _forward(pt: dict, image: TraceImage, ops, want_cache: bool):
    """pt: params already cast to the working dtype."""
    dtype = pt["conv1.w"].dtype
    ys = image.ys.astype(np.int64)
    xs = image.xs.astype(np.int64)
    wf = np.ascontiguousarray(pt["conv1.w"].sum(axis=1))
    pooled1, src1, pre1 = ops.sparse_conv_pool_forward(
        ys, xs, wf, pt["conv1.b"], SIDE, POOL)
    z2 = ops.conv2d_forward(pooled1, pt["conv2.w"], pt["conv2.b"])
    a2 = np.maximum(z2, 0)
    p2, src2 = ops.maxpool_forward(a2, POOL)
    f = p2.reshape(-1)
    h1 = np.maximum(pt["fc1.w"] @ f + pt["fc1.b"], 0)
    h2 = np.maximum(pt["fc2.w"] @ h1 + pt["fc2.b"], 0)
    logits = pt["fc3.w"] @ h2 + pt["fc3.b"]
    if not want_cache:
        return logits, None
    cache = dict(ys=ys, xs=xs, pooled1=pooled1, src1=src1, pre1=pre1,
                 z2=z2, src2=src2, f=f, h1=h1, h2=h2, dtype=dtype)
    return logits, cache


def cnn_forward(model: CnnModel, image: TraceImage,
                dtype=np.float32) -> np.ndarray:
    """Class logits for one image."""
    pt = _cast_params(model.params, dtype)
    logits, _ = _forward(pt, image, kernels.get_ops(), want_cache=False)
    return logits


def _softmax_xent(logits: np.ndarray, target: int):
    z = logits.astype(np.float64)
    z -= z.max()
    e = np.exp(z)
    p = e / e.sum()
    loss = -math.log(max(float(p[target]), 1e-300))
    dz = p
    dz[target] -= 1.0
    return loss, dz


def _loss_and_grads(pt: dict, image: TraceImage, target: int, ops):
    logits, cache = _forward(pt, image, ops, want_cache=True)
    loss, dz = _softmax_xent(logits, target)
    dtype = cache["dtype"]
    g = dz.astype(dtype)
    grads = {
        "fc3.w": np.outer(g, cache["h2"]),
        "fc3.b": g,
    }
    gh2 = (pt["fc3.w"].T @ g) * (cache["h2"] > 0)
    grads["fc2.w"] = np.outer(gh2, cache["h1"])
    grads["fc2.b"] = gh2
    gh1 = (pt["fc2.w"].T @ gh2) * (cache["h1"] > 0)
    grads["fc1.w"] = np.outer(gh1, cache["f"])
    grads["fc1.b"] = gh1
    gf = pt["fc1.w"].T @ gh1
    gp2 = np.ascontiguousarray(gf.reshape(C2, POOL2_OUT, POOL2_OUT))
    ga2 = ops.maxpool_backward(gp2, cache["src2"], CONV2_OUT, CONV2_OUT)
    gz2 = np.ascontiguousarray(ga2 * (cache["z2"] > 0))
    gx1, gw2, gb2 = ops.conv2d_backward(cache["pooled1"], pt["conv2.w"], gz2)
    grads["conv2.w"] = gw2
    grads["conv2.b"] = gb2
    gwf, gb1 = ops.sparse_conv_pool_backward(
        np.ascontiguousarray(gx1), cache["ys"], cache["xs"],
        cache["src1"], cache["pre1"], KERNEL, SIDE)
    # Folded-kernel gradient applies identically to each replicated channel.
    grads["conv1.w"] = np.repeat(gwf[:, None], 3, axis=1)
    grads["conv1.b"] = gb1
    return loss, grads


def _loss_only(pt: dict, image: TraceImage, target: int, ops) -> float:
    logits, _ = _forward(pt, image, ops, want_cache=False)
    return _softmax_xent(logits, target)[0]


# ---------------------------------------------------------------------------
# training


def _labels_and_classes(images, task):
    labels = [img.label(task) for img in images]
    classes = sorted(set(labels), key=_class_key)
    return labels, classes


def _val_split(y: np.ndarray, fraction: float, seed: int):
    """Stratified validation split; returns (train_idx, val_idx)."""
    val: list[int] = []
    if fraction > 0:
        for c in np.unique(y):
            idx = np.where(y == c)[0]
            n_val = int(round(fraction * idx.size))
            if n_val > 0:
                order = stream(seed, "val-split", str(int(c))).permutation(
                    idx.size)
                val.extend(int(idx[j]) for j in order[:n_val])
    val_set = set(val)
    train = np.array([i for i in range(y.size) if i not in val_set],
                     dtype=np.int64)
    return train, np.array(sorted(val_set), dtype=np.int64)


def _accuracy(pt: dict, images, targets, ops) -> float:
    if len(targets) == 0:
        return 0.0
    hits = 0
    for img, t in zip(images, targets):
        logits, _ = _forward(pt, img, ops, want_cache=False)
        if int(np.argmax(logits)) == t:
            hits += 1
    return hits / len(targets)


def cnn_train(images, task: str, hyper: Hyper | None = None,
              seed: int = 0) -> CnnModel:
    """Train a classifier for `task` on labelled images.

    Deterministic for a given (images, task, hyper, seed, backend): He
    init, per-epoch shuffles, and the validation split all come from named
    seed streams, and per-batch gradients accumulate in ascending sample
    index order.  The returned model carries the parameters of the epoch
    with the best validation accuracy (first epoch on ties); training
    stops early once validation accuracy reaches `stop_at_val_accuracy`.
    """
    hyper = hyper or Hyper()
    labels, classes = _labels_and_classes(images, task)
    model = init_model(task, classes, seed)
    if hyper.epochs == 0:
        return model
    ops = kernels.get_ops()
    class_to_idx = {c: i for i, c in enumerate(classes)}
    y = np.array([class_to_idx[l] for l in labels], dtype=np.int64)
    train_idx, val_idx = _val_split(y, hyper.val_fraction, seed)
    val_images = [images[i] for i in val_idx]
    val_targets = [int(y[i]) for i in val_idx]

    params = {k: v.copy() for k, v in model.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    best = (None, -1.0, None)  # (epoch, val_acc, snapshot)
    history: list[dict] = []

    for epoch in range(hyper.epochs):
        order = stream(seed, f"epoch-{epoch}", "order").permutation(
            train_idx.size)
        shuffled = train_idx[order]
        epoch_loss, n_seen = 0.0, 0
        for lo in range(0, shuffled.size, hyper.batch_size):
            batch = np.sort(shuffled[lo: lo + hyper.batch_size])
            pt = _cast_params(params, np.float32)
            acc_grads = None
            for i in batch:
                loss, grads = _loss_and_grads(pt, images[i], int(y[i]), ops)
                epoch_loss += loss
                if acc_grads is None:
                    acc_grads = {k: g.astype(np.float64) for k, g in
                                 grads.items()}
                else:
                    for k, g in grads.items():
                        acc_grads[k] += g
                n_seen += 1
            inv = 1.0 / batch.size
            for k in params:
                gmean = acc_grads[k] * inv
                velocity[k] = hyper.momentum * velocity[k] \
                    - hyper.learning_rate * gmean
                params[k] = params[k] + velocity[k]
        record = {"epoch": epoch, "mean_loss": epoch_loss / max(n_seen, 1)}
        pt = _cast_params(params, np.float32)
        if val_idx.size:
            val_acc = _accuracy(pt, val_images, val_targets, ops)
            record["val_accuracy"] = val_acc
            if val_acc > best[1]:
                best = (epoch, val_acc,
                        {k: v.copy() for k, v in params.items()})
        if hyper.track_train_loss:
            record["train_loss"] = float(np.mean(
                [_loss_only(pt, images[i], int(y[i]), ops)
                 for i in train_idx]))
        history.append(record)
        if val_idx.size and best[1] >= hyper.stop_at_val_accuracy:
            break

    if best[2] is not None:
        model.params = best[2]
        model.selected_epoch = best[0]
    else:
        model.params = params
        model.selected_epoch = hyper.epochs - 1
    model.history = history
    return model


def predict(model: CnnModel, image: TraceImage) -> str:
    return model.classes[int(np.argmax(cnn_forward(model, image)))]


def evaluate(model: CnnModel, images, task: str | None = None) -> float:
    """Fraction of images whose predicted class matches their label."""
    task = task or model.task
    pt = _cast_params(model.params, np.float32)
    ops = kernels.get_ops()
    targets = [model.class_index(img.label(task)) for img in images]
    return _accuracy(pt, images, targets, ops)


# ---------------------------------------------------------------------------
# k-fold evaluation


@dataclass
class KFoldReport:
    task: str
    k: int
    fold_sizes: list[int]
    accuracies: list[float]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))


def _stratified_folds(labels, k: int, seed: int) -> list[np.ndarray]:
    """k folds, stratified per class, sizes equal when k divides the total.

    Samples are dealt round-robin class by class with a carried cursor so
    per-class remainders spread across folds instead of piling onto the
    first ones.  Classes smaller than k trigger a warning and a plain
    unstratified deal.
    """
    classes = sorted(set(labels), key=_class_key)
    counts = {c: labels.count(c) for c in classes}
    folds: list[list[int]] = [[] for _ in range(k)]
    if min(counts.values()) < k:
        warnings.warn(
            f"class(es) with fewer than {k} members; folds are not "
            "stratified", stacklevel=2)
        order = stream(seed, "fold", "all").permutation(len(labels))
        for pos, j in enumerate(order):
            folds[pos % k].append(int(j))
    else:
        cursor = 0
        for c in classes:
            idx = [i for i, l in enumerate(labels) if l == c]
            order = stream(seed, "fold", c).permutation(len(idx))
            for j in order:
                folds[cursor % k].append(idx[int(j)])
                cursor += 1
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


def kfold_evaluate(images, task: str, k: int = 5,
                   hyper: Hyper | None = None, seed: int = 0) -> KFoldReport:
    """Stratified k-fold cross-validation of cnn_train on `task`."""
    labels = [img.label(task) for img in images]
    folds = _stratified_folds(labels, k, seed)
    accuracies, sizes = [], []
    for f, test_idx in enumerate(folds):
        test_set = set(int(i) for i in test_idx)
        train_images = [img for i, img in enumerate(images)
                        if i not in test_set]
        fold_seed = int(stream(seed, "fold-seed", str(f)).raw(1)[0] >> 33)
        model = cnn_train(train_images, task, hyper, seed=fold_seed)
        test_images = [images[int(i)] for i in test_idx]
        accuracies.append(evaluate(model, test_images, task))
        sizes.append(int(test_idx.size))
    return KFoldReport(task=task, k=k, fold_sizes=sizes,
                       accuracies=accuracies)


# ---------------------------------------------------------------------------
# gradient check


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    per_tensor: dict[str, float]


def _quota(sizes: list[int], wanted: int) -> int:
    total = sum(sizes)
    wanted = min(wanted, total)
    q = 1
    while sum(min(q, s) for s in sizes) < wanted:
        q += 1
    return q


def gradient_check(model: CnnModel, image: TraceImage, label: str,
                   epsilon: float = 1e-6, min_params: int = 200,
                   seed: int = 0) -> GradCheckResult:
    """Central-difference audit of the analytic gradient in float64.

    Checks at least `min_params` parameters spread across every tensor
    (whole tensor when it is smaller than the per-tensor quota).  The
    reported error for a parameter is |analytic - numeric| divided by
    max(|analytic| + |numeric|, 1e-4): relative for healthy magnitudes,
    absolute below the 1e-4 floor so float64 cancellation noise in the
    central difference is not amplified.  Rectifier and pooling
    subgradients use the strict-positive / first-maximum conventions, so
    the comparison is exact away from kinks; callers should pass a model
    with non-zero biases to stay off the rectifier kink at zero.
    """
    target = model.class_index(label)
    ops = kernels.get_ops()
    pt = _cast_params(model.params, np.float64)
    _, grads = _loss_and_grads(pt, image, target, ops)
    names = list(pt)
    quota = _quota([pt[n].size for n in names], min_params)
    worst, checked = 0.0, 0
    per_tensor: dict[str, float] = {}
    for name in names:
        flat = pt[name].reshape(-1)
        gflat = grads[name].reshape(-1)
        n_pick = min(quota, flat.size)
        picks = stream(seed, "gradcheck", name).choice(flat.size, n_pick)
        t_worst = 0.0
        for i in picks:
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = _loss_only(pt, image, target, ops)
            flat[i] = orig - epsilon
            lm = _loss_only(pt, image, target, ops)
            flat[i] = orig
            numeric = (lp - lm) / (2 * epsilon)
            analytic = float(gflat[i])
            err = abs(analytic - numeric) / max(
                abs(analytic) + abs(numeric), 1e-4)
            t_worst = max(t_worst, err)
            checked += 1
        per_tensor[name] = t_worst
        worst = max(worst, t_worst)
    return GradCheckResult(max_rel_error=worst, n_checked=checked,
                           per_tensor=per_tensor)


# ---------------------------------------------------------------------------
# serialization


def model_to_checkpoint(model: CnnModel) -> Checkpoint:
    tensors = [WeightTensor(name, model.params[name].astype(np.float32))
               for name, _ in tensor_shapes(model.n_classes)]
    meta = {
        "vendor": "toolkit",
        "framework": "cnn",
        "arch": f"cnn-{model.task}",
        "task": model.task,
        "classes": json.dumps(model.classes),
    }
    return Checkpoint(tensors=tensors, metadata=meta)


def save_model(model: CnnModel, path) -> None:
    """Serialize to the weight container (float32 storage)."""
    write_wbin(model_to_checkpoint(model), path)


def load_model(path) -> CnnModel:
    ckpt = read_wbin(path)
    meta = ckpt.metadata
    if "task" not in meta or "classes" not in meta:
        raise ToolkitError("checkpoint does not hold a classifier (missing "
                           "task/classes metadata)", code="not-a-classifier")
    classes = json.loads(meta["classes"])
    params = {t.name: t.data.astype(np.float64) for t in ckpt.tensors}
    expected = dict(tensor_shapes(len(classes)))
    for name, shape in expected.items():
        if name not in params or params[name].shape != shape:
            raise ToolkitError(f"classifier tensor {name!r} missing or "
                               f"mis-shaped", code="not-a-classifier")
    return CnnModel(task=meta["task"], classes=classes, params=params)
