"""Trace rasterization: (start, duration) scatter plots as 1024 x 1024 images.

Each kernel event becomes one black pixel: x is the invocation time scaled
to the trace span, y is the execution time scaled to the longest kernel,
with y inverted so longer kernels sit higher (row 0).  Both axes normalize
by their per-trace maximum, so uniformly rescaling all durations (or the
clock) leaves the image unchanged.

Images stay sparse: a TraceImage stores the black-pixel coordinates plus
classification labels, and densifies on demand for export or inspection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pgm import write_pgm
from .tracesim import KernelTrace

SIDE = 1024
CHANNELS = 3  # grayscale replicated; classifiers declare 3 input channels


@dataclass
class TraceImage:
    xs: np.ndarray  # int32 column of each black pixel
    ys: np.ndarray  # int32 row of each black pixel (0 = longest kernels)
    encoder_count: int | None = None
    vendor: str | None = None
    framework: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.int32)
        self.ys = np.asarray(self.ys, dtype=np.int32)
        if self.xs.shape != self.ys.shape:
            raise ValueError("xs and ys must have matching shapes")

    def __len__(self) -> int:
        return int(self.xs.size)

    def grid(self) -> np.ndarray:
        """Dense (SIDE, SIDE) uint8 occupancy grid, 1 = black pixel."""
        g = np.zeros((SIDE, SIDE), dtype=np.uint8)
        g[self.ys, self.xs] = 1
        return g

    def label(self, task: str) -> str:
        values = {
            "encoder_count": self.encoder_count,
            "vendor": self.vendor,
            "framework": self.framework,
        }
        if task not in values:
            raise KeyError(f"unknown task {task!r}")
        if values[task] is None:
            raise ValueError(f"image carries no {task} label")
        return str(values[task])


def rasterize(trace: KernelTrace) -> TraceImage:
    """Scatter a trace's events onto the fixed 1024 x 1024 canvas.

    x = floor(1023 * start / max_start), y = 1023 - floor(1023 * dur /
    max_dur); coincident events merge into one pixel, so the pixel count
    never exceeds the event count.
    """
    if len(trace) == 0:
        raise ValueError("cannot rasterize an empty trace")
    start = trace.start_ns.astype(np.float64)
    dur = trace.dur_ns.astype(np.float64)
    max_start = start.max()
    max_dur = dur.max()
    if max_start > 0:
        xs = np.floor((SIDE - 1) * start / max_start).astype(np.int32)
    else:
        xs = np.zeros(len(trace), dtype=np.int32)
    ys = (SIDE - 1) - np.floor((SIDE - 1) * dur / max_dur).astype(np.int32)
    flat = np.unique(ys.astype(np.int64) * SIDE + xs)
    prov = trace.provenance or {}
    count = prov.get("encoders")
    return TraceImage(
        xs=(flat % SIDE).astype(np.int32),
        ys=(flat // SIDE).astype(np.int32),
        encoder_count=int(count) if count is not None else None,
        vendor=prov.get("vendor"),
        framework=prov.get("framework"),
    )


def image_to_pgm(image: TraceImage, path) -> None:
    """Export as binary PGM: black pixels (0) on a white canvas (255)."""
    write_pgm((1 - image.grid()) * np.uint8(255), path)


def column_histogram(image: TraceImage, top_rows: int) -> np.ndarray:
    """Black-pixel count per column, restricted to the top `top_rows` rows
    (the longest-duration kernels).  Encoder repetitions show up here as
    evenly spaced clusters."""
    keep = image.ys < top_rows
    return np.bincount(image.xs[keep], minlength=SIDE)


def band_count(image: TraceImage, top_fraction: float = 0.25) -> int:
    """Number of column clusters formed by the longest-duration pixels.

    Pixels in the top `top_fraction` of the duration axis are projected
    onto x and split at the widest class of column gaps (anything above
    0.7x the largest gap).  The two feed-forward peaks inside one encoder
    sit at ~0.6x of the encoder-to-encoder spacing, so they merge into a
    single band while encoder repetitions stay separate — on clean
    unfused (eager) traces the result equals the repeat count.  Fused
    graph traces are out of scope: their compiled block inserts a long
    quiet span that dwarfs every other gap (use the period detector for
    counting there).
    """
    hist = column_histogram(image, int(round(top_fraction * SIDE)))
    cols = np.nonzero(hist)[0]
    if cols.size == 0:
        return 0
    gaps = np.diff(cols)
    if gaps.size == 0 or gaps.max() < 10:
        return 1
    return int(1 + np.sum(gaps > 0.7 * gaps.max()))
