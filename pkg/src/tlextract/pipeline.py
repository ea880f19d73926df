"""End-to-end attack composition: trace → identity → pool → extraction.

Stages: recover the architecture hypothesis from the victim's kernel trace;
identify (vendor, framework) — primarily from the kernel-id namespace
embedded in the trace (each vendor/framework pair allocates its kernel ids
from a distinct range), cross-checked against trained trace-image
classifiers when supplied; select the matching pre-trained checkpoint from
the model pool; plan probe bits against that base; extract through the
probe oracle; verify when ground truth is available.

Any stage that cannot proceed (unidentified trace, pool miss, oracle
mismatch) degrades the run to an architecture-only result instead of
failing: the hypothesis and anomaly list still come back.

The JSON form of a result is canonical (sorted keys, no whitespace) and
excludes the timing breakdown by default, so identical inputs and seeds
produce byte-identical JSON; pass ``include_timing=True`` for profiling
output.
"""

from __future__ import annotations

import json
import os
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .archextract import (SIZE_BASE, SIZE_LARGE, ArchitectureHypothesis,
                          extract_architecture)
from .checkpoint import Checkpoint, write_wbin
from .cnn import CnnModel, predict
from .config import Config
from .errors import ToolkitError
from .extraction import (DEFAULT_POLICY, ExtractionReport, ProbeOracle,
                         extract, plan_bits, verify)
from .finetune import ArchSpec
from .modelpool import DEFAULT_VARIANT, ModelPool
from .raster import rasterize
from .tracesim import FRAMEWORKS, VENDORS, KernelTrace, _PAIR_STRIDE

_SIZE_HIDDEN = {SIZE_BASE: 768, SIZE_LARGE: 1024}


def signature_identity(trace: KernelTrace) -> tuple[str, str] | None:
    """(vendor, framework) from the trace's kernel-id namespace.

    The simulator allocates each (vendor, framework) pair its own id range
    (the stand-in for real vendor-signature detection, which the attack
    model assumes available a priori).  Returns None when no id falls in
    any known range."""
    pairs = trace.kid[trace.kid >= _PAIR_STRIDE] // _PAIR_STRIDE - 1
    pairs = pairs[(pairs >= 0) & (pairs < len(VENDORS) * len(FRAMEWORKS))]
    if pairs.size == 0:
        return None
    counts = {}
    for p in pairs:
        counts[int(p)] = counts.get(int(p), 0) + 1
    pair = max(sorted(counts), key=counts.get)
    return VENDORS[pair // len(FRAMEWORKS)], FRAMEWORKS[pair % len(FRAMEWORKS)]


def classifier_identity(trace: KernelTrace,
                        classifiers: dict[str, CnnModel]
                        ) -> dict[str, str]:
    """Per-task predictions from trained trace-image classifiers."""
    image = rasterize(trace)
    return {task: predict(model, image)
            for task, model in classifiers.items()}


def arch_label(hypothesis: ArchitectureHypothesis) -> str | None:
    """Pool-lookup architecture label, or None when underdetermined."""
    count = hypothesis.encoder_count
    hidden = _SIZE_HIDDEN.get(hypothesis.encoder_size)
    if count is None or hidden is None:
        return None
    return ArchSpec(count, hidden, heads=4).label


@dataclass
class PipelineResult:
    hypothesis: ArchitectureHypothesis
    vendor: str | None
    framework: str | None
    signature_pair: tuple[str, str] | None
    classifier_predictions: dict[str, str]
    arch: str | None
    selected_path: Path | None
    report: ExtractionReport | None
    anomalies: list[str]
    timing_ms: dict[str, float] = field(default_factory=dict)

    @property
    def degraded(self) -> bool:
        return self.report is None

    def to_json_dict(self, include_timing: bool = False) -> dict:
        out = {
            "hypothesis": self.hypothesis.to_dict(),
            "vendor": self.vendor,
            "framework": self.framework,
            "signature_pair": list(self.signature_pair)
            if self.signature_pair else None,
            "classifier_predictions": dict(self.classifier_predictions),
            "arch": self.arch,
            "selected": self.selected_path.name
            if self.selected_path else None,
            "report": self.report.to_json_dict() if self.report else None,
            "degraded": self.degraded,
            "anomalies": list(self.anomalies),
        }
        if include_timing:
            out["timing_ms"] = {k: round(v, 3)
                                for k, v in self.timing_ms.items()}
        return out


def result_json(result: PipelineResult, include_timing: bool = False) -> str:
    return json.dumps(result.to_json_dict(include_timing),
                      sort_keys=True, separators=(",", ":"))


def run_pipeline(trace: KernelTrace, oracle: ProbeOracle, pool: ModelPool,
                 classifiers: dict[str, CnnModel] | None = None,
                 config: Config | None = None,
                 victim: Checkpoint | None = None,
                 clone_out=None) -> PipelineResult:
    cfg = config or Config()
    policy = cfg.get("policy", DEFAULT_POLICY, section="pipeline")
    variant = cfg.get("pool_variant", DEFAULT_VARIANT, section="pipeline")
    cal_ns = cfg.getint("calibration_ns", None, section="pipeline")
    calibration = ({"eager": cal_ns, "graph": cal_ns}
                   if cal_ns is not None else None)

    timing: dict[str, float] = {}
    anomalies: list[str] = []

    t0 = time.perf_counter()
    hypothesis = extract_architecture(trace, calibration=calibration)
    timing["detect"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    sig = signature_identity(trace)
    predictions = (classifier_identity(trace, classifiers)
                   if classifiers else {})
    timing["identify"] = (time.perf_counter() - t0) * 1e3

    vendor = framework = None
    if sig is not None:
        vendor, framework = sig
        cls_pair = (predictions.get("vendor", vendor),
                    predictions.get("framework", framework))
        if cls_pair != (vendor, framework):
            anomalies.append("classifier-signature-disagreement")
    elif {"vendor", "framework"} <= set(predictions):
        vendor, framework = predictions["vendor"], predictions["framework"]
        anomalies.append("identity-from-classifier-only")
    else:
        anomalies.append("unidentified-trace")

    label = arch_label(hypothesis)
    if label is None and hypothesis.encoder_count is not None:
        anomalies.append("size-unknown")

    def degraded() -> PipelineResult:
        return PipelineResult(
            hypothesis=hypothesis, vendor=vendor, framework=framework,
            signature_pair=sig, classifier_predictions=predictions,
            arch=label, selected_path=None, report=None,
            anomalies=anomalies, timing_ms=timing)

    if len(pool) == 0:
        warnings.warn("model pool is empty; architecture-only result")
        anomalies.append("empty-pool")
        return degraded()
    if vendor is None or label is None:
        return degraded()

    selected = pool.lookup(vendor, framework, label, variant)
    if selected is None:
        anomalies.append("pool-miss")
        return degraded()

    t0 = time.perf_counter()
    base = pool.load(vendor, framework, label, variant)
    plan = plan_bits(base, policy=policy)
    timing["plan"] = (time.perf_counter() - t0) * 1e3

    t0 = time.perf_counter()
    try:
        clone, report = extract(plan, oracle, base)
    except ToolkitError as exc:
        if exc.code != "oracle-mismatch":
            raise
        anomalies.append("oracle-mismatch")
        return degraded()
    timing["extract"] = (time.perf_counter() - t0) * 1e3

    if victim is not None:
        t0 = time.perf_counter()
        report = verify(clone, victim, plan)
        timing["verify"] = (time.perf_counter() - t0) * 1e3
    if clone_out is not None:
        tmp = Path(clone_out).with_suffix(".tmp-%d" % os.getpid())
        write_wbin(clone, tmp)
        os.replace(tmp, clone_out)

    return PipelineResult(
        hypothesis=hypothesis, vendor=vendor, framework=framework,
        signature_pair=sig, classifier_predictions=predictions,
        arch=label, selected_path=selected, report=report,
        anomalies=anomalies, timing_ms=timing)
