"""Architecture recovery from kernel traces.

Periodicity lives in the kernel-id token sequence: the detector anchors on
high-duration events, reads the repetition period from the spacing of one
anchor kernel's occurrences, and validates candidate periods by exact token
similarity between consecutive units.  Durations are used only to rank
anchor candidates, to find the compiled-block region (a long run of
sub-5-microsecond events), and to classify encoder size by peak kernel
duration — so duration noise cannot corrupt the recovered token structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ToolkitError
from .tracesim import ATTENTION_TAGS, KernelTrace, SignatureProfile

SHORT_EVENT_NS = 5_000        # below this an event counts as compiled glue
REGION_WINDOW = 64            # events per change-point window
MIN_BLOCK_WINDOWS = 2         # consecutive short windows that signal a block
MAX_ANCHOR_TRIES = 8
ANCHOR_DURATION_FLOOR = 0.5   # anchors need >= half the trace's peak duration
PARTIAL_UNIT_FRACTION = 0.8   # trailing unit counted when this much matches
SIMILARITY_FLOOR = 0.8        # token agreement required between units
EAGER_MAX_PERIOD = 100        # unit lengths above this are graph-family
MIN_SEGMENT_EVENTS = 6

DEFAULT_CALIBRATION = {"eager": 700_000, "graph": 700_000}

SIZE_BASE = "base-like"
SIZE_LARGE = "large-like"
SIZE_UNKNOWN = "unknown"


@dataclass
class Region:
    kind: str  # "prologue" | "encoder-region" | "xla-region" | "epilogue"
    start: int
    end: int


@dataclass
class PeriodResult:
    period: int | None
    count: int
    boundaries: list[tuple[int, int]]
    score: float
    anchor_kid: int | None


@dataclass
class SegmentReport:
    layer_map: list[tuple[str, int, int, int]]  # (label, start, end, total_ns)
    attention_ns: int
    ff_ns: int
    anomalies: list[str]


@dataclass
class ArchitectureHypothesis:
    encoder_count: int | None
    encoder_size: str
    period: int | None
    boundaries: list[tuple[int, int]]
    regions: list[Region]
    anomalies: list[str]
    layer_map: list[tuple[str, int, int, int]] | None = None
    anchor_kid: int | None = None

    def to_dict(self) -> dict:
        return {
            "encoders": self.encoder_count,
            "size": self.encoder_size,
            "regions": [[r.kind, r.start, r.end] for r in self.regions],
            "anomalies": list(self.anomalies),
        }


def hypothesis_json(hypothesis: ArchitectureHypothesis) -> str:
    return json.dumps(hypothesis.to_dict())


def _match_len(a: np.ndarray, b: np.ndarray) -> int:
    """Length of the longest common prefix of two token arrays."""
    m = min(a.size, b.size)
    if m == 0:
        return 0
    eq = a[:m] == b[:m]
    return m if eq.all() else int(np.argmax(~eq))


def _trailing_coverage(toks: np.ndarray, occ: np.ndarray, period: int) -> int:
    """How much of the final anchored unit is present and matches the
    periodic extension, in events out of `period`.

    The anchor's offset inside its unit is read off the FIRST occurrence:
    matching backward from the first two anchors in lockstep stops exactly
    where the first unit's content ends and non-periodic lead-in begins.
    The final unit then covers offset + 1 + (forward match after the last
    anchor); a full unit covers the whole period."""
    first, second = int(occ[0]), int(occ[1])
    off = _match_len(toks[first - 1::-1] if first else toks[:0],
                     toks[second - 1::-1] if second else toks[:0])
    off = min(off, period - 1)
    fwd = _match_len(toks[int(occ[-1]) + 1:], toks[int(occ[-2]) + 1:])
    return min(period, off + 1 + fwd)


def detect_period(trace: KernelTrace) -> PeriodResult:
    """Find the dominant repetition in the kernel-id sequence.

    Anchors are tried in decreasing-duration order.  For each anchor kernel
    the candidate period is the modal gap between its occurrences; larger
    gaps are tolerated as bridges (e.g. one compiled block splitting the
    repetitions).  A candidate is accepted only when consecutive units agree
    token-for-token, so arbitrary duration noise cannot fake or destroy a
    detection.  Returns a zero-count result when nothing repeats.
    """
    toks = trace.kid
    durs = trace.dur_ns
    n = toks.size
    empty = PeriodResult(None, 0, [], 0.0, None)
    if n == 0:
        return empty
    order = np.argsort(durs, kind="stable")[::-1]
    floor = durs[order[0]] * ANCHOR_DURATION_FLOOR
    tried: set[int] = set()
    for idx in order:
        if durs[idx] < floor:
            break  # anchors must be relative peaks, not bulk traffic
        kid = int(toks[idx])
        if kid in tried:
            continue
        if len(tried) >= MAX_ANCHOR_TRIES:
            break
        tried.add(kid)
        occ = np.where(toks == kid)[0]
        if occ.size < 2:
            continue
        gaps = np.diff(occ)
        vals, counts = np.unique(gaps, return_counts=True)
        period = int(vals[np.argmax(counts)])
        mode_frac = counts.max() / gaps.size
        bridges = gaps > period
        if mode_frac < 0.5 or not ((gaps == period) | bridges).all():
            continue
        if bridges.sum() > 2:
            continue

        # validate token periodicity on consecutive-unit pairs whose second
        # window is itself a clean unit (followed at period distance by the
        # next anchor), so bridges and the trace tail never dilute the score
        sims = []
        for j in np.where(gaps == period)[0]:
            if j + 1 >= gaps.size or gaps[j + 1] != period:
                continue
            a, b = int(occ[j]), int(occ[j + 1])
            if b + period > n:
                continue
            sims.append(float(np.mean(toks[a:a + period] == toks[b:b + period])))
            if len(sims) >= 128:
                break
        coverage = _trailing_coverage(toks, occ, period)
        if sims:
            if float(np.mean(sims)) < SIMILARITY_FLOOR:
                continue
        else:
            if coverage < PARTIAL_UNIT_FRACTION * period:
                continue
            if period == 1 and occ.size < 3:
                continue

        count = int(occ.size)
        boundaries = [(int(o), int(min(o + period, n))) for o in occ]
        if n - occ[-1] < period and coverage < PARTIAL_UNIT_FRACTION * period:
            count -= 1
            boundaries.pop()
        if count == 0:
            continue
        score = float(np.mean(gaps == period))
        return PeriodResult(period, count, boundaries, score, kid)
    return empty


def locate_regions(trace: KernelTrace, window: int = REGION_WINDOW,
                   short_ns: int = SHORT_EVENT_NS) -> list[Region]:
    """Split the trace around a compiled block, if one exists.

    The block is the longest run of consecutive windows whose maximum
    duration stays below 5 us; encoder templates always carry a big kernel
    within any such window, so only the compiled block qualifies.  Without
    one, the whole trace is a single encoder-region.
    """
    n = len(trace)
    whole = [Region("encoder-region", 0, n)]
    if n < window * MIN_BLOCK_WINDOWS:
        return whole
    usable = (n // window) * window
    wmax = trace.dur_ns[:usable].reshape(-1, window).max(axis=1)
    short = wmax < short_ns
    best_len, best_at, run, run_at = 0, -1, 0, 0
    for i, s in enumerate(short):
        if s:
            if run == 0:
                run_at = i
            run += 1
            if run > best_len:
                best_len, best_at = run, run_at
        else:
            run = 0
    if best_len < MIN_BLOCK_WINDOWS:
        return whole
    lo = best_at * window
    hi = (best_at + best_len) * window
    while lo > 0 and trace.dur_ns[lo - 1] < short_ns:
        lo -= 1
    while hi < n and trace.dur_ns[hi] < short_ns:
        hi += 1
    regions = []
    if lo > 0:
        regions.append(Region("encoder-region", 0, lo))
    regions.append(Region("xla-region", lo, hi))
    if hi < n:
        regions.append(Region("encoder-region", hi, n))
    return regions


def _census(trace: KernelTrace, regions: list[Region]) -> PeriodResult:
    """Fallback for block-split traces too short for gap statistics: one
    encoder unit on each side of the block.  The peak kernel is taken as
    the anchor; its occurrences count as units when the token neighborhoods
    on both sides of the block agree."""
    empty = PeriodResult(None, 0, [], 0.0, None)
    enc = [r for r in regions if r.kind == "encoder-region"]
    if len(enc) != 2:
        return empty
    toks = trace.kid
    kid = int(toks[int(np.argmax(trace.dur_ns))])
    occ = np.where(toks == kid)[0]
    lead = occ[(occ >= enc[0].start) & (occ < enc[0].end)]
    trail = occ[(occ >= enc[1].start) & (occ < enc[1].end)]
    if lead.size == 0 or trail.size == 0 or occ.size != lead.size + trail.size:
        return empty
    l, t = int(lead[0]), int(trail[0])
    fwd = _match_len(toks[l + 1:enc[0].end], toks[t + 1:enc[1].end])
    back = _match_len(toks[enc[0].start:l][::-1], toks[enc[1].start:t][::-1])
    if fwd + back + 1 < MIN_SEGMENT_EVENTS:
        return empty
    boundaries = [(r.start, r.end) for r in enc]
    return PeriodResult(None, int(occ.size), boundaries, 0.0, kid)


def estimate_size(trace: KernelTrace, calibration: dict | None = None, *,
                  boundaries: list[tuple[int, int]] | None = None,
                  family: str | None = None) -> str:
    """Classify encoder size by the maximum kernel duration inside the
    encoder repetitions, against a per-family calibrated threshold.
    Unknown family or missing calibration yields "unknown" rather than a
    guess."""
    calibration = DEFAULT_CALIBRATION if calibration is None else calibration
    if boundaries is None:
        res = detect_period(trace)
        if res.count == 0:
            return SIZE_UNKNOWN
        boundaries = res.boundaries
        if family is None:
            family = "eager" if res.period <= EAGER_MAX_PERIOD else "graph"
    if family is None or family not in calibration or not boundaries:
        return SIZE_UNKNOWN
    peak = 0
    for s, e in boundaries:
        if e > s:
            peak = max(peak, int(trace.dur_ns[s:e].max()))
    return SIZE_LARGE if peak >= calibration[family] else SIZE_BASE


def segment_encoder(trace: KernelTrace, boundary: tuple[int, int],
                    hints: SignatureProfile) -> SegmentReport:
    """Split one encoder unit into labeled layer segments.

    The unit splits into attention (prefix) and feed-forward (suffix) at its
    peak event; the attention prefix partitions into sub-blocks at the
    vendor-documented matmul kernels.  The three longest, equal-duration
    sub-blocks are the Q/K/V projections and the next-longest is the
    attention score; more than three peak-equal blocks flags an extra core
    vector, and a segment far below its calibrated duration flags a
    shortened layer.
    """
    s, e = boundary
    if e - s < MIN_SEGMENT_EVENTS:
        raise ToolkitError(
            f"unit of {e - s} events is too short to segment",
            code="unit-too-short")
    kid = trace.kid[s:e]
    dur = trace.dur_ns[s:e]
    # the feed-forward pair dominates every unit; the earlier of the two
    # largest events starts the FF segment even when jitter reorders them
    top2 = np.argsort(dur, kind="stable")[-2:]
    split = int(top2.min())
    if split == 0:
        raise ToolkitError("unit starts at its peak; nothing precedes the "
                           "feed-forward segment", code="unit-unphased")
    att_dur = dur[:split]
    att_kid = kid[:split]
    ff_ns = int(dur[split:].sum())
    attention_ns = int(att_dur.sum())

    starts = np.where(np.isin(att_kid, list(hints.matmul_kids)))[0]
    if starts.size == 0:
        starts = np.array([0])
    if starts[0] != 0:
        starts = np.concatenate([[0], starts])
    ends = np.concatenate([starts[1:], [split]])
    totals = np.array([att_dur[a:b].sum() for a, b in zip(starts, ends)],
                      dtype=np.int64)

    order = np.argsort(totals, kind="stable")[::-1]
    labels = ["elementwise"] * len(totals)
    top3 = sorted(order[:3])
    for name, pos in zip(("q", "k", "v"), top3):
        labels[pos] = name
    if len(totals) > 3:
        labels[order[3]] = "score"

    anomalies = _flag_anomalies(totals, attention_ns, ff_ns, hints)
    layer_map = [(labels[i], s + int(starts[i]), s + int(ends[i]),
                  int(totals[i])) for i in range(len(totals))]
    layer_map.append(("ff", s + split, e, ff_ns))
    return SegmentReport(layer_map, attention_ns, ff_ns, anomalies)


def _flag_anomalies(att_totals: np.ndarray, attention_ns: float, ff_ns: float,
                    hints: SignatureProfile) -> list[str]:
    """Structural red flags relative to the documented signature.  More than
    three peak-equal attention blocks means an extra core projection; a
    segment far below its calibrated duration means a shortened layer."""
    anomalies = []
    peak_equal = int((att_totals >= 0.9 * att_totals.max()).sum())
    if peak_equal > 3:
        anomalies.append("extra-core-vector")
    att_ref = sum(ev.mean_ns for ev in hints.encoder_template
                  if ev.tag in ATTENTION_TAGS)
    ff_ref = sum(ev.mean_ns for ev in hints.encoder_template
                 if ev.tag == "ff")
    if attention_ns < 0.7 * att_ref or ff_ns < 0.7 * ff_ref:
        anomalies.append("shortened-layer")
    return anomalies


def _assemble_regions(located: list[Region], boundaries, n: int) -> list[Region]:
    """Tile the trace: prologue, encoder-regions, optional xla-region,
    epilogue — non-overlapping and ordered."""
    first = min(b[0] for b in boundaries)
    last = max(b[1] for b in boundaries)
    block = next((r for r in located if r.kind == "xla-region"), None)
    out = []
    if first > 0:
        out.append(Region("prologue", 0, first))
    if block is not None and first <= block.start and block.end <= last:
        out.append(Region("encoder-region", first, block.start))
        out.append(Region("xla-region", block.start, block.end))
        out.append(Region("encoder-region", block.end, last))
    else:
        out.append(Region("encoder-region", first, last))
    if last < n:
        out.append(Region("epilogue", last, n))
    return [r for r in out if r.end > r.start]


def extract_architecture(trace: KernelTrace, calibration: dict | None = None,
                         hints: SignatureProfile | None = None
                         ) -> ArchitectureHypothesis:
    """Full pipeline: regions -> period -> count -> size -> segmentation.

    Soft failures (nothing repeats, a unit too short to segment) propagate
    as unknown fields and anomaly notes; this function never raises on
    malformed-but-readable traces.
    """
    n = len(trace)
    located = locate_regions(trace)
    block = next((r for r in located if r.kind == "xla-region"), None)
    res = detect_period(trace)
    if res.count == 0 and block is not None:
        res = _census(trace, located)
    if res.count == 0:
        return ArchitectureHypothesis(
            encoder_count=None, encoder_size=SIZE_UNKNOWN, period=None,
            boundaries=[], regions=located, anomalies=["no-repetition"])

    boundaries = list(res.boundaries)
    anomalies: list[str] = []
    if hints is not None and res.period is not None:
        # offset of the detected anchor kernel inside the documented template
        first_index: dict[int, int] = {}
        for i, ev in enumerate(hints.encoder_template):
            first_index.setdefault(ev.kid, i)
        off = first_index.get(res.anchor_kid, hints.anchor_offset)
        rephased = []
        for b0, _ in boundaries:
            start = max(b0 - off, 0)
            rephased.append((start, min(start + res.period, n)))
        boundaries = rephased
    elif block is not None and res.period is not None:
        # anchor-phased units must not straddle the compiled block
        boundaries = [
            (b0, min(b1, block.start) if b0 < block.start else b1)
            for b0, b1 in boundaries
        ]

    family = "graph" if (block is not None or
                         (res.period is not None and
                          res.period > EAGER_MAX_PERIOD)) else "eager"
    size = estimate_size(trace, calibration, boundaries=boundaries,
                         family=family)
    regions = _assemble_regions(located, boundaries, n)

    layer_map = None
    if hints is not None and res.period is not None and boundaries:
        reports = []
        for b in boundaries:
            if b[1] - b[0] != res.period:
                continue  # clipped partial units would skew the averages
            try:
                reports.append(segment_encoder(trace, b, hints))
            except ToolkitError as exc:
                anomalies.append(exc.code)
                break
        if reports:
            layer_map = reports[0].layer_map
            shapes = {len(r.layer_map) for r in reports}
            if len(shapes) == 1:
                # flag on unit-averaged totals: jitter on a single unit can
                # blur the equal-block test, the average cannot
                att = np.mean([[t for _, _, _, t in r.layer_map[:-1]]
                               for r in reports], axis=0)
                attention = float(np.mean([r.attention_ns for r in reports]))
                ff = float(np.mean([r.ff_ns for r in reports]))
                anomalies.extend(_flag_anomalies(att, attention, ff, hints))
            else:
                anomalies.extend(sorted({a for r in reports
                                         for a in r.anomalies}))

    return ArchitectureHypothesis(
        encoder_count=res.count, encoder_size=size, period=res.period,
        boundaries=boundaries, regions=regions, anomalies=anomalies,
        layer_map=layer_map, anchor_kid=res.anchor_kid)
