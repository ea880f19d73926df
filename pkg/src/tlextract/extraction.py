"""Selective weight checking with similarity-guided bit pruning.

The cloning attack assumes the victim was fine-tuned from a known base
checkpoint, so every victim weight is expected within +/-0.002 of its base
counterpart and with the same sign and exponent.  Planning then discards
work in two phases:

* phase 1 — weights whose base magnitude is below 0.001 are never probed;
  the clone simply keeps the base value (``skip-clone-base``);
* phase 2 — each surviving weight gets at most two fraction-bit probes,
  chosen by one of two policies:

  - ``algorithm1``: a literal two-iteration loop starting at the most
    significant set fraction bit k; bit k is probed iff the candidate
    value 2^(e-bias) + place_value(e, k) lies inside the +/-0.002 window
    around the base magnitude.  Depending on where the magnitude sits
    relative to the bit lattice this can select zero to two bits.
  - ``worked-example`` (default): probe fraction bits msb+1 and msb+2,
    clamped to the format's fraction width.

Probing is simulated by a :class:`ProbeOracle` holding the hidden victim;
reads flip with a configurable error rate.  Extraction splices the probed
bits into a copy of the base — sign and exponent fields are never touched —
and verification applies the correctness rule: a weight is correct iff
|clone - victim| <= 0.002 and the sign matches; excluded bits only count
as *correctly* excluded when their weight is correct.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, WeightTensor
from .errors import ShapeMismatchError, ToolkitError
from .floatbits import (FORMATS, F32, FloatFormat, fraction_msb_array,
                        split_bits_array)
from .rng import stream

SMALL_WEIGHT_THRESHOLD = 1e-3
SIMILARITY_WINDOW = 2e-3

ACTION_SKIP = 0
ACTION_PROBE = 1

POLICY_ALGORITHM1 = "algorithm1"
POLICY_WORKED_EXAMPLE = "worked-example"
POLICIES = (POLICY_ALGORITHM1, POLICY_WORKED_EXAMPLE)
DEFAULT_POLICY = POLICY_WORKED_EXAMPLE

#: Tensors whose similarity assumption is weak (fine-tuning rewrites the
#: task head roughly 10x harder than encoder weights), flagged
#: low-confidence in plans and reports.
LOW_CONFIDENCE_PREFIX = "task."


def _values_to_bits(values_f32: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """Bit patterns (uint32) of float32-stored values in `fmt`.

    Values must already be exactly representable in `fmt` (checkpoints in
    f16/bf16 are quantized first), so the casts below are lossless.
    """
    v = np.ascontiguousarray(values_f32, dtype="<f4")
    if fmt.name == "f32":
        return v.view(np.uint32).astype(np.uint32)
    if fmt.name == "f16":
        return v.astype("<f2").view(np.uint16).astype(np.uint32)
    return (v.view(np.uint32) >> np.uint32(16)).astype(np.uint32)


def _bits_to_values(bits: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    """Inverse of :func:`_values_to_bits`; returns float32 values."""
    b = np.ascontiguousarray(bits)
    if fmt.name == "f32":
        return b.astype("<u4").view(np.float32).copy()
    if fmt.name == "f16":
        return b.astype("<u2").view(np.float16).astype(np.float32)
    return (b.astype(np.uint32) << np.uint32(16)).view(np.float32).copy()


def _check_format(fmt: FloatFormat) -> FloatFormat:
    if fmt.name not in FORMATS:
        raise ToolkitError(f"unsupported float format {fmt!r}",
                           code="bad-format")
    return fmt


# ---------------------------------------------------------------------------
# planning


@dataclass
class TensorPlan:
    name: str
    action: np.ndarray       # uint8 per weight: ACTION_SKIP / ACTION_PROBE
    probe_bits: np.ndarray   # int8 (n, 2): fraction-bit indices, -1 = none
    low_confidence: bool

    @property
    def weights_total(self) -> int:
        return int(self.action.size)

    @property
    def weights_probed(self) -> int:
        return int((self.action == ACTION_PROBE).sum())

    @property
    def bits_probed(self) -> int:
        return int((self.probe_bits >= 0).sum())


@dataclass
class PlanEntry:
    tensor: str
    index: int
    action: str              # "skip-clone-base" | "probe"
    probe_bits: list[int]
    window: tuple[float, float] | None


@dataclass
class BitCheckPlan:
    policy: str
    format: FloatFormat
    tensors: dict[str, TensorPlan]
    base: Checkpoint

    @property
    def weights_total(self) -> int:
        return sum(t.weights_total for t in self.tensors.values())

    @property
    def weights_probed(self) -> int:
        return sum(t.weights_probed for t in self.tensors.values())

    @property
    def bits_probed(self) -> int:
        return sum(t.bits_probed for t in self.tensors.values())

    @property
    def low_confidence_tensors(self) -> list[str]:
        return [n for n, t in self.tensors.items() if t.low_confidence]

    def entry(self, tensor: str, index: int) -> PlanEntry:
        tp = self.tensors[tensor]
        probed = tp.action[index] == ACTION_PROBE
        bits = [int(b) for b in tp.probe_bits[index] if b >= 0]
        window = None
        if probed:
            base_val = float(self.base.tensor(tensor).data.reshape(-1)[index])
            window = (base_val - SIMILARITY_WINDOW,
                      base_val + SIMILARITY_WINDOW)
        return PlanEntry(tensor=tensor, index=index,
                         action="probe" if probed else "skip-clone-base",
                         probe_bits=bits, window=window)

    def iter_entries(self, tensor: str):
        for i in range(self.tensors[tensor].weights_total):
            yield self.entry(tensor, i)

    def to_json_dict(self) -> dict:
        """Aggregate JSON form (per-weight entries stay in-memory; a full
        dump of multi-million-weight plans would be impractical)."""
        return {
            "policy": self.policy,
            "format": self.format.name,
            "totals": {
                "weights_total": self.weights_total,
                "weights_probed": self.weights_probed,
                "bits_probed": self.bits_probed,
            },
            "tensors": [
                {
                    "name": t.name,
                    "weights_total": t.weights_total,
                    "weights_probed": t.weights_probed,
                    "bits_probed": t.bits_probed,
                    "low_confidence": t.low_confidence,
                }
                for t in self.tensors.values()
            ],
        }


def _plan_tensor(name: str, values: np.ndarray, policy: str,
                 fmt: FloatFormat) -> TensorPlan:
    flat32 = np.ascontiguousarray(values, dtype=np.float32).reshape(-1)
    v = flat32.astype(np.float64)
    n = v.size
    probe = (np.abs(v) >= SMALL_WEIGHT_THRESHOLD) & np.isfinite(v)
    action = probe.astype(np.uint8)
    bits = np.full((n, 2), -1, dtype=np.int8)
    if probe.any():
        idx = np.nonzero(probe)[0]
        raw = _values_to_bits(flat32[idx], fmt)
        _, exp, frac = split_bits_array(raw, fmt)
        msb = fraction_msb_array(frac, fmt)
        if policy == POLICY_WORKED_EXAMPLE:
            cand = np.stack([msb + 1, msb + 2], axis=1)
            ok = cand <= fmt.fraction_bits
        else:
            # literal two-iteration loop: k = msb, msb+1; probe bit k iff
            # the candidate magnitude 2^(e-bias) + place_value(e, k) lies
            # inside [|base| - 0.002, |base| + 0.002]
            k0 = np.where(msb == 0, 1, msb)
            cand = np.stack([k0, k0 + 1], axis=1)
            mag = np.abs(v[idx])
            e = exp.astype(np.int64)
            int_base = np.ldexp(1.0, (e - fmt.bias).astype(np.int32))
            pv = np.ldexp(1.0, (e[:, None] - fmt.bias
                                - cand).astype(np.int32))
            target = int_base[:, None] + pv
            ok = ((target >= (mag - SIMILARITY_WINDOW)[:, None])
                  & (target <= (mag + SIMILARITY_WINDOW)[:, None])
                  & (cand <= fmt.fraction_bits))
        chosen = np.where(ok, cand, -1).astype(np.int8)
        # left-justify single picks into column 0
        swap = (chosen[:, 0] < 0) & (chosen[:, 1] >= 0)
        chosen[swap, 0] = chosen[swap, 1]
        chosen[swap, 1] = -1
        bits[idx] = chosen
    return TensorPlan(name=name, action=action, probe_bits=bits,
                      low_confidence=name.startswith(LOW_CONFIDENCE_PREFIX))


def plan_bits(base: Checkpoint, policy: str = DEFAULT_POLICY,
              fmt: FloatFormat = F32) -> BitCheckPlan:
    """Two-phase probe plan over every tensor of `base`."""
    _check_format(fmt)
    if policy not in POLICIES:
        raise ToolkitError(f"unknown policy {policy!r}; expected one of "
                           f"{POLICIES}", code="bad-policy")
    tensors = {t.name: _plan_tensor(t.name, t.data, policy, fmt)
               for t in base.tensors}
    return BitCheckPlan(policy=policy, format=fmt, tensors=tensors,
                        base=base)


# ---------------------------------------------------------------------------
# probe oracle


class ProbeOracle:
    """Bit-probe access to a hidden victim checkpoint.

    Each probe reveals one fraction bit of one victim weight, flipped with
    probability `error_rate`.  Flips are driven by an internal buffered
    uniform stream consumed one value per probe, so issuing probes one at
    a time or in vectorized batches yields the identical read sequence.
    """

    _CHUNK = 8192

    def __init__(self, victim: Checkpoint, fmt: FloatFormat = F32,
                 error_rate: float = 0.0, seed: int = 0):
        _check_format(fmt)
        if not 0.0 <= error_rate <= 1.0:
            raise ToolkitError("error rate must be within [0, 1]",
                               code="bad-error-rate")
        self._victim = victim
        self._bits = {t.name: _values_to_bits(t.data.reshape(-1), fmt)
                      for t in victim.tensors}
        self.format = fmt
        self.error_rate = float(error_rate)
        self.probe_count = 0
        self._stream = stream(seed, "probe-oracle")
        self._buf = np.empty(0, dtype=np.float64)

    def tensor_names(self) -> list[str]:
        return self._victim.names()

    def _uniforms(self, n: int) -> np.ndarray:
        while self._buf.size < n:
            self._buf = np.concatenate(
                [self._buf, self._stream.uniform(self._CHUNK)])
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def probe_many(self, tensor: str, indices: np.ndarray,
                   bits: np.ndarray) -> np.ndarray:
        """Vectorized probe; returns uint8 bit reads in call order."""
        if tensor not in self._bits:
            raise ToolkitError(f"victim has no tensor {tensor!r}",
                               code="oracle-mismatch")
        indices = np.asarray(indices, dtype=np.int64)
        bits = np.asarray(bits, dtype=np.int64)
        if bits.size and (bits.min() < 1 or bits.max() >
                          self.format.fraction_bits):
            raise ToolkitError(
                f"fraction-bit index out of range for {self.format.name}",
                code="bad-bit-index")
        raw = self._bits[tensor][indices]
        shift = (self.format.fraction_bits - bits).astype(np.uint32)
        truth = ((raw >> shift) & np.uint32(1)).astype(np.uint8)
        self.probe_count += int(indices.size)
        if self.error_rate == 0.0:
            return truth
        flips = (self._uniforms(indices.size) < self.error_rate)
        return (truth ^ flips.astype(np.uint8)).astype(np.uint8)

    def probe(self, tensor: str, index: int, bit: int) -> int:
        """Scalar probe of one fraction bit (1 = most significant)."""
        return int(self.probe_many(tensor, np.array([index]),
                                   np.array([bit]))[0])


# ---------------------------------------------------------------------------
# extraction / verification


@dataclass
class ExtractionReport:
    policy: str
    format: str
    weights_total: int
    weights_probed: int
    weights_excluded: int
    bits_total: int
    bits_probed: int
    bits_excluded: int
    probes_issued: int
    low_confidence_tensors: list[str] = field(default_factory=list)
    # correctness accounting (None until verify() runs with ground truth)
    weights_correct: int | None = None
    weights_correctly_excluded: int | None = None
    bits_correctly_excluded: int | None = None
    correct_fraction: float | None = None
    mean_abs_error: float | None = None
    mean_abs_error_probed: float | None = None

    @property
    def raw_bit_exclusion_ratio(self) -> float:
        return self.bits_excluded / self.bits_total if self.bits_total else 0.0

    @property
    def correct_bit_exclusion_ratio(self) -> float | None:
        if self.bits_correctly_excluded is None or not self.bits_total:
            return None
        return self.bits_correctly_excluded / self.bits_total

    def to_json_dict(self) -> dict:
        out = {
            "policy": self.policy,
            "format": self.format,
            "weights_total": self.weights_total,
            "weights_probed": self.weights_probed,
            "weights_excluded": self.weights_excluded,
            "bits_total": self.bits_total,
            "bits_probed": self.bits_probed,
            "bits_excluded": self.bits_excluded,
            "probes_issued": self.probes_issued,
            "raw_bit_exclusion_ratio": self.raw_bit_exclusion_ratio,
            "low_confidence_tensors": list(self.low_confidence_tensors),
        }
        if self.correct_fraction is not None:
            out.update({
                "weights_correct": self.weights_correct,
                "weights_correctly_excluded": self.weights_correctly_excluded,
                "bits_correctly_excluded": self.bits_correctly_excluded,
                "correct_bit_exclusion_ratio":
                    self.correct_bit_exclusion_ratio,
                "correct_fraction": self.correct_fraction,
                "mean_abs_error": self.mean_abs_error,
                "mean_abs_error_probed": self.mean_abs_error_probed,
            })
        return out


def _accounting(plan: BitCheckPlan, probes_issued: int) -> ExtractionReport:
    total = plan.weights_total
    probed = plan.weights_probed
    bits_total = total * plan.format.fraction_bits
    bits_probed = plan.bits_probed
    return ExtractionReport(
        policy=plan.policy, format=plan.format.name,
        weights_total=total, weights_probed=probed,
        weights_excluded=total - probed,
        bits_total=bits_total, bits_probed=bits_probed,
        bits_excluded=bits_total - bits_probed,
        probes_issued=probes_issued,
        low_confidence_tensors=plan.low_confidence_tensors)


def extract(plan: BitCheckPlan, oracle: ProbeOracle,
            base: Checkpoint, transcript_path=None
            ) -> tuple[Checkpoint, ExtractionReport]:
    """Clone the victim: copy base, splice in probed fraction bits.

    Probes are issued per tensor in plan order — first-probe bits in
    ascending weight index, then second-probe bits — so the oracle's read
    sequence (and any error flips) is reproducible.  Sign and exponent
    fields are never modified.
    """
    if oracle.format.name != plan.format.name:
        raise ToolkitError("oracle and plan use different formats",
                           code="oracle-mismatch")
    plan_names = list(plan.tensors)
    if sorted(oracle.tensor_names()) != sorted(plan_names):
        raise ToolkitError("oracle victim tensors do not match the plan",
                           code="oracle-mismatch")
    fmt = plan.format
    transcript = [] if transcript_path is not None else None
    clone_tensors = []
    probes_issued = 0
    for t in base.tensors:
        tp = plan.tensors[t.name]
        flat = t.data.reshape(-1)
        bits = _values_to_bits(flat, fmt)
        for col in (0, 1):
            sel = np.nonzero(tp.probe_bits[:, col] >= 0)[0]
            if sel.size == 0:
                continue
            bcol = tp.probe_bits[sel, col].astype(np.int64)
            reads = oracle.probe_many(t.name, sel, bcol)
            probes_issued += int(sel.size)
            mask = (np.uint32(1)
                    << (fmt.fraction_bits - bcol).astype(np.uint32))
            cur = bits[sel]
            bits[sel] = np.where(reads.astype(bool),
                                 cur | mask, cur & ~mask)
            if transcript is not None:
                transcript.extend(
                    (t.name, int(i), int(b), int(r))
                    for i, b, r in zip(sel, bcol, reads))
        clone_tensors.append(WeightTensor(
            t.name, _bits_to_values(bits, fmt).reshape(t.data.shape),
            format=t.format))
    clone = Checkpoint(tensors=clone_tensors,
                       metadata=dict(base.metadata))
    if transcript is not None:
        with open(transcript_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["tensor", "index", "bit", "value"])
            w.writerows(transcript)
    return clone, _accounting(plan, probes_issued)


def verify(clone: Checkpoint, victim: Checkpoint,
           plan: BitCheckPlan) -> ExtractionReport:
    """Correctness accounting against ground truth.

    A weight is correct iff |clone - victim| <= 0.002 and its sign bit
    matches; bits excluded from probing count as correctly excluded only
    when their weight is correct.  Emits both the raw and the
    correctness-discounted bit-exclusion ratios.
    """
    report = _accounting(plan, plan.bits_probed)
    fmt = plan.format
    fb = fmt.fraction_bits
    correct_total = 0
    correct_excluded = 0
    bits_correct_excluded = 0
    abs_err_sum = 0.0
    abs_err_probed_sum = 0.0
    probed_total = 0
    for name, tp in plan.tensors.items():
        try:
            c = clone.tensor(name).data.reshape(-1)
            v = victim.tensor(name).data.reshape(-1)
        except KeyError:
            raise ShapeMismatchError(
                f"victim is missing tensor {name!r}")
        if c.shape != v.shape:
            raise ShapeMismatchError(
                f"tensor {name!r}: clone {c.shape} vs victim {v.shape}")
        diff = np.abs(c.astype(np.float64) - v.astype(np.float64))
        sign_c, _, _ = split_bits_array(_values_to_bits(c, fmt), fmt)
        sign_v, _, _ = split_bits_array(_values_to_bits(v, fmt), fmt)
        good = (diff <= SIMILARITY_WINDOW) & (sign_c == sign_v)
        probed = tp.action == ACTION_PROBE
        n_bits = (tp.probe_bits >= 0).sum(axis=1).astype(np.int64)
        correct_total += int(good.sum())
        correct_excluded += int((good & ~probed).sum())
        bits_correct_excluded += int(((fb - n_bits) * good).sum())
        abs_err_sum += float(diff.sum())
        abs_err_probed_sum += float(diff[probed].sum())
        probed_total += int(probed.sum())
    report.weights_correct = correct_total
    report.weights_correctly_excluded = correct_excluded
    report.bits_correctly_excluded = bits_correct_excluded
    report.correct_fraction = correct_total / report.weights_total
    report.mean_abs_error = abs_err_sum / report.weights_total
    report.mean_abs_error_probed = (
        abs_err_probed_sum / probed_total if probed_total else 0.0)
    return report


def truncate_below(ckpt: Checkpoint) -> Checkpoint:
    """Truncate every weight toward zero at 10^-3 granularity
    (0.0013 -> 0.001, -0.0027 -> -0.002, 0.0 -> 0.0)."""
    tensors = [
        WeightTensor(t.name,
                     (np.trunc(t.data.astype(np.float64) * 1000.0)
                      / 1000.0).astype(np.float32),
                     format=t.format)
        for t in ckpt.tensors
    ]
    return Checkpoint(tensors=tensors, metadata=dict(ckpt.metadata))
