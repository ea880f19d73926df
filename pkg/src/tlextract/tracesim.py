"""Kernel-trace simulator: vendor/framework signatures over encoder loops.

A trace is a flat sequence of (kernel id, duration) events: a prologue
(setup, transfers), N repetitions of an encoder template, and a task-layer
epilogue.  Frameworks differ in granularity:

* ``eager``       — ~40 chunky events per encoder, distinct big matmuls;
* ``graph-xla``   — ~240 mostly-tiny fused events per encoder, with the
                    encoder repetitions split around a long arch-independent
                    block of very short compiled kernels;
* ``graph-plain`` — ~320 fused events per encoder, one contiguous run of
                    repetitions and a long epilogue.

Every (vendor, framework) pair owns a disjoint kernel-id space except kernel
id 0, which every profile shares.  Durations are jittered per event with a
truncated Gaussian (5% of mean, clipped at 2 sigma); the kernel-id sequence
itself is deterministic, so duration noise never disturbs token structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .errors import UnknownLabelError
from .finetune import ArchSpec
from .rng import stream

VENDORS = ("acme", "globex", "initech", "umbra")
FRAMEWORKS = ("eager", "graph-xla", "graph-plain")

# extra 1 us bookkeeping kernels per encoder, the per-vendor tell
VENDOR_GLUE = {"acme": 4, "globex": 8, "initech": 12, "umbra": 16}

COMMON_KID = 0
COMMON_KNAME = "sync_barrier"

_PAIR_STRIDE = 10_000
_BLOCK_LOCAL = 1_000

JITTER_FRACTION = 0.05
JITTER_CLIP_SIGMA = 2.0

XLA_BLOCK_EVENTS = 800
XLA_BLOCK_UNIQUE = 780

ATTENTION_TAGS = ("q", "k", "v", "score", "softmax", "layer_norm")

K = 1000  # ns per us, keeps the tables readable


class KernelEvent(NamedTuple):
    seq: int
    start_ns: int
    duration_ns: int
    kernel_id: int
    kernel_name: str


@dataclass
class KernelTrace:
    kid: np.ndarray       # int64 kernel ids
    dur_ns: np.ndarray    # int64 durations, > 0
    start_ns: np.ndarray  # int64 nondecreasing starts
    knames: list[str]
    provenance: dict | None = None

    def __len__(self) -> int:
        return int(self.kid.size)

    @property
    def events(self) -> Iterator[KernelEvent]:
        for i in range(len(self)):
            yield KernelEvent(i, int(self.start_ns[i]), int(self.dur_ns[i]),
                              int(self.kid[i]), self.knames[i])


@dataclass
class TemplateEvent:
    kid: int
    kname: str
    mean_ns: int
    jitter_ns: int
    tag: str


@dataclass
class SignatureProfile:
    vendor: str
    framework: str
    arch: ArchSpec
    encoder_template: list[TemplateEvent]
    prologue: list[TemplateEvent]
    epilogue: list[TemplateEvent]
    xla_block: tuple[list[int], np.ndarray] | None  # (kids, duration_ns)
    kernels_per_encoder: int  # family template length, before vendor glue
    unique_kernel_count: int
    matmul_kids: frozenset[int] = field(default_factory=frozenset)
    anchor_offset: int = 0  # template index of the peak kernel

    @property
    def peak_mean_ns(self) -> int:
        return max(e.mean_ns for e in self.encoder_template)


def _scaled(mean_us: float, scale: float) -> int:
    return max(1, round(mean_us * K * scale))


# Vendor fingerprint: every vendor library pads each attention site with
# exactly one 1 us helper kernel (keeping q/k/v totals identical across
# vendors), then trails the feed-forward section with a vendor-specific
# burst of helper kernels pinned to fixed fractions of the template's peak
# kernel.  Expressing pad durations as peak fractions makes the texture
# survive peak-normalization and architecture scaling: each vendor owns a
# nested set of duration bands ({}, {.18}, {.18,.3}, {.18,.3,.42}) that
# timing classifiers can read directly.  All fractions stay below the 0.5
# anchor floor (with jitter margin), so period detection never sees them.
_VENDOR_PAD_FRACTIONS = {
    4: (),
    8: (0.18,) * 4,
    12: (0.18,) * 4 + (0.30,) * 4,
    16: (0.18,) * 4 + (0.30,) * 4 + (0.42,) * 4,
}


def _vendor_rows(glue: int, peak_us: float):
    site = [("vendor_glue", 1)]
    ramp = [("vendor_pad", max(2, round(f * peak_us)), "ff")
            for f in _VENDOR_PAD_FRACTIONS[glue]]
    return site, ramp


def _eager_template(scale: float, glue: int):
    rows = []
    site, ramp = _vendor_rows(glue, peak_us=600)
    for b in ("q", "k", "v"):
        rows += [("proj_matmul", 90, b), ("bias_add", 8, b), ("reshape", 5, b),
                 ("transpose", 4, b), ("copy", 3, b)]
        rows += [(n, m, b) for n, m in site]
    rows += [("score_matmul", 60, "score"), ("scale", 5, "score"),
             ("mask_add", 4, "score"), ("ctx_matmul", 10, "score"),
             ("copy", 2, "score")]
    rows += [("sm_exp", 12, "softmax"), ("sm_sum", 8, "softmax"),
             ("sm_div", 6, "softmax"), ("copy", 2, "softmax")]
    rows += [(n, m, "softmax") for n, m in site]
    rows += [("residual_add", 4, "layer_norm"), ("ln_stats", 8, "layer_norm"),
             ("ln_apply", 6, "layer_norm"), ("ln_stats", 8, "layer_norm"),
             ("ln_apply", 6, "layer_norm")]
    rows += [("ff_matmul_1", 600, "ff"), ("bias_add", 10, "ff"),
             ("gelu", 40, "ff"), ("ff_matmul_2", 580, "ff"),
             ("bias_add", 8, "ff"), ("dropout", 6, "ff"),
             ("residual_add", 4, "ff"), ("copy", 3, "ff"),
             ("reshape", 5, "ff"), ("copy", 3, "ff"), ("sync", 2, "ff")]
    rows += ramp
    matmuls = {"proj_matmul", "score_matmul", "ctx_matmul",
               "ff_matmul_1", "ff_matmul_2"}
    return [(n, _scaled(m, scale), t) for n, m, t in rows], matmuls, 40


def _graph_template(scale: float, glue: int, plain: bool):
    """Fused-kernel templates: a few scaled matmuls in a sea of 1 us glue."""
    rows = []
    counter = [0]

    def g(tag, n):
        for _ in range(n):
            rows.append((f"fused_{counter[0]:03d}", 1, tag))
            counter[0] += 1

    site, ramp = _vendor_rows(glue, peak_us=430)
    if plain:
        proj, qk, av, ff1, ff2 = 25, 16, 8, 430, 380
        proj_glue, qk_glue, sm, ln, ff_glue = 59, 32, 15, 15, (36, 37)
    else:
        proj, qk, av, ff1, ff2 = 20, 12, 8, 430, 210
        proj_glue, qk_glue, sm, ln, ff_glue = 44, 22, 12, 12, (27, 27)
    for b in ("q", "k", "v"):
        rows.append((f"fused_{b}_proj", proj, b))
        g(b, proj_glue)
        rows += [(n, m, b) for n, m in site]
    rows.append(("fused_qk", qk, "score"))
    g("score", qk_glue)
    rows.append(("fused_av", av, "score"))
    g("score", 1)
    g("softmax", sm)
    rows += [(n, m, "softmax") for n, m in site]
    g("layer_norm", ln)
    rows.append(("fused_ff_1", ff1, "ff"))
    g("ff", ff_glue[0])
    rows.append(("fused_ff_2", ff2, "ff"))
    g("ff", ff_glue[1])
    rows += ramp
    matmuls = {"fused_q_proj", "fused_k_proj", "fused_v_proj",
               "fused_qk", "fused_av", "fused_ff_1", "fused_ff_2"}
    per_encoder = 320 if plain else 240
    out = []
    for n, m, t in rows:
        scaled = _scaled(m, scale) if m > 1 else m * K  # glue stays 1 us
        out.append((n, scaled, t))
    return out, matmuls, per_encoder


# Deliberately aperiodic interleave: no kernel here recurs at a steady
# stride, so setup traffic can never masquerade as encoder repetitions.
_PROLOGUE_ORDER = (
    "sync", "init", "h2d", "h2d", "embed", "h2d", "pos", "embed", "h2d",
    "mask", "h2d", "embed", "embed", "h2d", "pos", "h2d", "h2d", "embed",
    "mask", "h2d", "pos", "embed", "h2d", "h2d", "mask", "embed", "h2d",
    "pos", "embed", "mask",
)
_PROLOGUE_KINDS = {
    "sync": (COMMON_KNAME, 10), "init": ("dev_init", 40),
    "h2d": ("h2d_copy", 180), "embed": ("embed_lookup", 150),
    "pos": ("pos_embed", 60), "mask": ("mask_build", 30),
}
_PROLOGUE = [_PROLOGUE_KINDS[k] for k in _PROLOGUE_ORDER]

_EPILOGUE = (
    [("d2h_copy", 120)] * 6 + [("pool_cls", 40)] * 4
    + [("task_matmul", 90)] * 6 + [("softmax_out", 10)] * 4
)

_EPILOGUE_PLAIN = [
    (f"epi_fused_{i}", m)
    for _ in range(5)
    for i, m in enumerate((110, 90, 70, 50, 40, 30, 25, 20, 15, 10))
]


def build_profile(vendor: str, framework: str, arch: ArchSpec, seed: int,
                  core_vectors: int = 3) -> SignatureProfile:
    """Deterministic signature for one (vendor, framework, arch) triple."""
    if vendor not in VENDORS:
        raise UnknownLabelError(f"unknown vendor {vendor!r}")
    if framework not in FRAMEWORKS:
        raise UnknownLabelError(f"unknown framework {framework!r}")
    if core_vectors < 3:
        raise ValueError("core_vectors must be >= 3")
    pair = VENDORS.index(vendor) * len(FRAMEWORKS) + FRAMEWORKS.index(framework)
    base = _PAIR_STRIDE * (pair + 1)
    glue = VENDOR_GLUE[vendor]

    if framework == "eager":
        scale = arch.hidden / 768.0
        rows, matmuls, per_enc = _eager_template(scale, glue)
    else:
        scale = (arch.hidden / 768.0) ** 3
        rows, matmuls, per_enc = _graph_template(scale, glue,
                                                 plain=framework == "graph-plain")
    for extra in range(core_vectors - 3):
        # an additional projection-sized block right after V
        tag = "v"
        insert = [(f"extra_proj_{extra}", rows[0][1], tag)]
        if framework == "eager":
            insert += [(n, _scaled(m, scale), tag) for n, m in
                       (("bias_add", 8), ("reshape", 5), ("transpose", 4),
                        ("copy", 3))]
        else:
            glue_n = 59 if framework == "graph-plain" else 44
            insert += [(f"fused_x{extra}_{i:02d}", K, tag)
                       for i in range(glue_n)]
        at = max(i for i, r in enumerate(rows) if r[2] == "v") + 1
        rows[at:at] = insert
        matmuls = matmuls | {f"extra_proj_{extra}"}

    ids: dict[str, int] = {COMMON_KNAME: COMMON_KID}

    def kid_of(name, offset):
        if name not in ids:
            ids[name] = base + offset + len(ids)
        return ids[name]

    template = [
        TemplateEvent(kid_of(n, 0), n, m,
                      max(1, round(JITTER_FRACTION * m)), t)
        for n, m, t in rows
    ]
    prologue = [
        TemplateEvent(kid_of(n, 600), n, m * K,
                      max(1, round(JITTER_FRACTION * m * K)), "prologue")
        for n, m in _PROLOGUE
    ]
    epi_rows = _EPILOGUE_PLAIN if framework == "graph-plain" else _EPILOGUE
    epilogue = [
        TemplateEvent(kid_of(n, 700), n, m * K,
                      max(1, round(JITTER_FRACTION * m * K)), "epilogue")
        for n, m in epi_rows
    ]

    xla_block = None
    if framework == "graph-xla":
        u = stream(seed, vendor, framework, "xla-block").uniform(XLA_BLOCK_EVENTS)
        durs = (1000 + np.floor(u * 3000)).astype(np.int64)
        kids = [base + _BLOCK_LOCAL + (i % XLA_BLOCK_UNIQUE)
                for i in range(XLA_BLOCK_EVENTS)]
        xla_block = (kids, durs)

    unique = len(ids) + (XLA_BLOCK_UNIQUE if xla_block else 0)
    peak_at = max(range(len(template)), key=lambda i: template[i].mean_ns)
    return SignatureProfile(
        vendor=vendor, framework=framework, arch=arch,
        encoder_template=template, prologue=prologue, epilogue=epilogue,
        xla_block=xla_block, kernels_per_encoder=per_enc,
        unique_kernel_count=unique,
        matmul_kids=frozenset(ids[n] for n in matmuls),
        anchor_offset=peak_at,
    )


@dataclass
class LayoutAnnotation:
    tags: list[str]                 # one per template position
    block_totals: dict[str, int]    # summed mean_ns per tag
    ff_over_attention: float


def intra_encoder_layout(profile: SignatureProfile) -> LayoutAnnotation:
    """Per-position layer tags and duration accounting of one encoder unit."""
    tags = [e.tag for e in profile.encoder_template]
    totals: dict[str, int] = {}
    for e in profile.encoder_template:
        totals[e.tag] = totals.get(e.tag, 0) + e.mean_ns
    attention = sum(totals.get(t, 0) for t in ATTENTION_TAGS)
    return LayoutAnnotation(tags, totals, totals["ff"] / attention)


def _render(events: list[TemplateEvent], g: np.ndarray):
    mean = np.array([e.mean_ns for e in events], dtype=np.float64)
    dur = np.rint(mean * (1.0 + JITTER_FRACTION * g)).astype(np.int64)
    return np.maximum(dur, 1)


def gen_trace(profile: SignatureProfile, seed: int) -> KernelTrace:
    """Prologue + encoder repetitions (split around the XLA block for
    graph-xla) + epilogue, with per-event truncated-Gaussian jitter."""
    reps = profile.arch.encoder_count
    segments: list[list[TemplateEvent]] = [profile.prologue]
    lead = reps - reps // 2
    if profile.xla_block is None:
        segments.append(profile.encoder_template * reps)
        block_at = None
    else:
        segments.append(profile.encoder_template * lead)
        block_at = sum(len(s) for s in segments)
        segments.append(profile.encoder_template * (reps - lead))
    segments.append(profile.epilogue)

    jittered = [e for s in segments for e in s]
    g = stream(seed, "trace-jitter").gaussian(len(jittered))
    np.clip(g, -JITTER_CLIP_SIGMA, JITTER_CLIP_SIGMA, out=g)
    dur = _render(jittered, g)
    kid = np.array([e.kid for e in jittered], dtype=np.int64)
    knames = [e.kname for e in jittered]

    if block_at is not None:
        bk, bd = profile.xla_block
        kid = np.concatenate([kid[:block_at], np.array(bk, dtype=np.int64),
                              kid[block_at:]])
        dur = np.concatenate([dur[:block_at], bd, dur[block_at:]])
        kname_by_kid = {k: f"xla_{i:03d}" for i, k in enumerate(dict.fromkeys(bk))}
        knames = (knames[:block_at] + [kname_by_kid[k] for k in bk]
                  + knames[block_at:])

    start = np.zeros_like(dur)
    np.cumsum(dur[:-1], out=start[1:])
    prov = {
        "vendor": profile.vendor,
        "framework": profile.framework,
        "arch": profile.arch.label,
        "encoders": str(reps),
        "seed": str(seed),
        "noise": "none",
    }
    return KernelTrace(kid, dur, start, knames, prov)


def inject_noise(trace: KernelTrace, n_kernels: int, amplitude_us: float,
                 seed: int) -> KernelTrace:
    """Exactly n_kernels distinct events get duration +/- amplitude.

    The sign is random per event, except that a negative hit which would
    push the duration below 1 ns is applied as positive instead, so every
    selected event moves by exactly the amplitude.  Start times and event
    order never change.
    """
    if n_kernels > len(trace):
        raise ValueError(f"cannot perturb {n_kernels} of {len(trace)} events")
    if amplitude_us < 0:
        raise ValueError("amplitude must be nonnegative")
    amp = round(amplitude_us * 1000)
    dur = trace.dur_ns.copy()
    picks = stream(seed, "noise-select").permutation(len(trace))[:n_kernels]
    signs = np.where(stream(seed, "noise-sign").uniform(n_kernels) < 0.5, -1, 1)
    flip = dur[picks] - amp < 1
    signs[flip] = 1
    dur[picks] = np.maximum(dur[picks] + signs * amp, 1)
    prov = dict(trace.provenance) if trace.provenance else None
    if prov is not None:
        prov["noise"] = f"n={n_kernels},amp_us={amplitude_us:g}"
    return KernelTrace(trace.kid.copy(), dur, trace.start_ns.copy(),
                       list(trace.knames), prov)


# ---------------------------------------------------------------------------
# JSONL trace files

def write_trace(trace: KernelTrace, path, include_provenance: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if include_provenance and trace.provenance is not None:
            fh.write(json.dumps({"provenance": trace.provenance}) + "\n")
        for i in range(len(trace)):
            fh.write(
                '{"seq":%d,"start_ns":%d,"dur_ns":%d,"kid":%d,"kname":%s}\n'
                % (i, trace.start_ns[i], trace.dur_ns[i], trace.kid[i],
                   json.dumps(trace.knames[i]))
            )


def read_trace(path) -> KernelTrace:
    prov = None
    seqs, starts, durs, kids, knames = [], [], [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if "provenance" in row:
                prov = row["provenance"]
                continue
            seqs.append(row["seq"])
            starts.append(row["start_ns"])
            durs.append(row["dur_ns"])
            kids.append(row["kid"])
            knames.append(row["kname"])
    return KernelTrace(np.array(kids, dtype=np.int64),
                       np.array(durs, dtype=np.int64),
                       np.array(starts, dtype=np.int64), knames, prov)
