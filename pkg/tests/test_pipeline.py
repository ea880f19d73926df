import json

import pytest

from tlextract.archextract import ArchitectureHypothesis
from tlextract.cnn import Hyper, cnn_train
from tlextract.config import parse_config_text
from tlextract.extraction import ProbeOracle
from tlextract.finetune import ArchSpec, DeltaModel, apply_finetune, gen_base
from tlextract.modelpool import ModelPool
from tlextract.pipeline import (PipelineResult, arch_label,
                                classifier_identity, result_json,
                                run_pipeline, signature_identity)
from tlextract.raster import rasterize
from tlextract.tracesim import (FRAMEWORKS, VENDORS, KernelTrace,
                                build_profile, gen_trace, inject_noise)

ARCH6 = ArchSpec(6, 768, 12)
TINY = ArchSpec(2, 16, 4)


@pytest.fixture(scope="module")
def base6():
    return gen_base(ARCH6, seed=31,
                    metadata={"vendor": "initech",
                              "framework": "graph-plain"})


@pytest.fixture(scope="module")
def victim6(base6):
    return apply_finetune(base6, DeltaModel(), seed=32)


@pytest.fixture(scope="module")
def trace6():
    p = build_profile("initech", "graph-plain", ARCH6, seed=7)
    return gen_trace(p, seed=8)


@pytest.fixture(scope="module")
def pool6(tmp_path_factory, base6):
    pool = ModelPool.scan(tmp_path_factory.mktemp("pool"))
    pool.add(base6)
    return pool


# ---------------------------------------------------------------------------
# identity


def test_signature_identity_every_pair():
    for vendor in VENDORS:
        for framework in FRAMEWORKS:
            p = build_profile(vendor, framework, TINY, seed=3)
            t = gen_trace(p, seed=4)
            assert signature_identity(t) == (vendor, framework)


def test_signature_identity_survives_noise():
    p = build_profile("umbra", "graph-xla", TINY, seed=5)
    t = inject_noise(gen_trace(p, seed=6), 16, 40.0, seed=7)
    assert signature_identity(t) == ("umbra", "graph-xla")


def test_signature_identity_unknown():
    p = build_profile("acme", "eager", TINY, seed=5)
    t = gen_trace(p, seed=6)
    anon = KernelTrace(kid=t.kid % 10000, dur_ns=t.dur_ns,
                       start_ns=t.start_ns, knames=t.knames,
                       provenance=None)
    assert signature_identity(anon) is None


def test_arch_label():
    def hyp(count, size):
        return ArchitectureHypothesis(encoder_count=count, encoder_size=size,
                                      period=1, boundaries=[], regions=[],
                                      anomalies=[])
    assert arch_label(hyp(12, "base-like")) == "base"
    assert arch_label(hyp(24, "large-like")) == "large"
    assert arch_label(hyp(6, "base-like")) == "enc6-h768"
    assert arch_label(hyp(None, "base-like")) is None
    assert arch_label(hyp(6, "unknown")) is None


# ---------------------------------------------------------------------------
# full runs


def test_run_pipeline_success(trace6, victim6, pool6, base6, tmp_path):
    oracle = ProbeOracle(victim6, seed=1)
    clone_path = tmp_path / "clone.wbin"
    res = run_pipeline(trace6, oracle, pool6, victim=victim6,
                       clone_out=clone_path)
    assert not res.degraded
    assert res.anomalies == []
    assert (res.vendor, res.framework) == ("initech", "graph-plain")
    assert res.signature_pair == ("initech", "graph-plain")
    assert res.arch == "enc6-h768"
    assert res.selected_path.name == "initech_graph-plain_enc6-h768_pretrained.wbin"
    assert res.hypothesis.encoder_count == 6
    assert res.report.weights_total == sum(
        base6.tensor(n).data.size for n in base6.names())
    assert res.report.correct_fraction is not None
    assert res.report.probes_issued == oracle.probe_count
    assert clone_path.exists()
    assert set(res.timing_ms) == {"detect", "identify", "plan",
                                  "extract", "verify"}


def test_run_pipeline_json_deterministic(trace6, victim6, pool6):
    outs = []
    for _ in range(2):
        res = run_pipeline(trace6, ProbeOracle(victim6, seed=9), pool6,
                           victim=victim6)
        outs.append(result_json(res))
    assert outs[0] == outs[1]
    assert outs[0].startswith('{"anomalies":')
    plain = json.loads(outs[0])
    assert "timing_ms" not in plain
    timed = json.loads(result_json(res, include_timing=True))
    assert "timing_ms" in timed


def test_run_pipeline_config_policy(trace6, victim6, pool6):
    cfg = parse_config_text("[pipeline]\npolicy = algorithm1\n")
    res = run_pipeline(trace6, ProbeOracle(victim6, seed=2), pool6,
                       config=cfg)
    assert res.report.policy == "algorithm1"
    # no ground truth handed over: accounting only, no correctness fields
    assert res.report.correct_fraction is None


def test_run_pipeline_empty_pool(trace6, victim6, tmp_path):
    pool = ModelPool.scan(tmp_path)
    with pytest.warns(UserWarning, match="empty"):
        res = run_pipeline(trace6, ProbeOracle(victim6), pool)
    assert res.degraded
    assert "empty-pool" in res.anomalies
    assert res.report is None and res.selected_path is None
    # identity and hypothesis still recovered
    assert res.vendor == "initech"
    assert res.hypothesis.encoder_count == 6


def test_run_pipeline_pool_miss(trace6, victim6, tmp_path):
    pool = ModelPool.scan(tmp_path)
    pool.add(gen_base(TINY, seed=1, metadata={"vendor": "acme",
                                              "framework": "eager"}))
    res = run_pipeline(trace6, ProbeOracle(victim6), pool)
    assert res.degraded
    assert "pool-miss" in res.anomalies


def test_run_pipeline_unidentified(trace6, victim6, pool6):
    anon = KernelTrace(kid=trace6.kid % 10000, dur_ns=trace6.dur_ns,
                       start_ns=trace6.start_ns, knames=trace6.knames,
                       provenance=None)
    res = run_pipeline(anon, ProbeOracle(victim6), pool6)
    assert res.degraded
    assert "unidentified-trace" in res.anomalies
    assert res.vendor is None and res.framework is None


def test_run_pipeline_oracle_mismatch(trace6, pool6):
    tiny_victim = gen_base(TINY, seed=40)
    res = run_pipeline(trace6, ProbeOracle(tiny_victim), pool6)
    assert res.degraded
    assert "oracle-mismatch" in res.anomalies


def test_run_pipeline_classifier_disagreement(trace6, victim6, pool6):
    arch = ArchSpec(4, 128, 4)
    images = []
    for vendor in ("globex", "umbra"):
        for seed in range(4):
            p = build_profile(vendor, "eager", arch, seed=seed)
            images.append(rasterize(gen_trace(p, seed=seed)))
    model = cnn_train(images, "vendor",
                      hyper=Hyper(epochs=4, batch_size=4, val_fraction=0.25),
                      seed=3)
    res = run_pipeline(trace6, ProbeOracle(victim6), pool6,
                       classifiers={"vendor": model})
    # signature identity wins; the clash is surfaced, not fatal
    assert "classifier-signature-disagreement" in res.anomalies
    assert res.vendor == "initech"
    assert not res.degraded
    assert res.classifier_predictions["vendor"] in ("globex", "umbra")


def test_classifier_identity_shape(trace6):
    arch = ArchSpec(4, 128, 4)
    images = []
    for seed in range(6):
        p = build_profile("acme", "eager", arch, seed=seed)
        img = rasterize(gen_trace(p, seed=seed))
        images.append(img)
    model = cnn_train(images[:4] + [rasterize(gen_trace(
        build_profile("globex", "eager", arch, seed=s), seed=s))
        for s in range(2)], "vendor",
        hyper=Hyper(epochs=3, batch_size=3, val_fraction=0.25), seed=1)
    out = classifier_identity(trace6, {"vendor": model})
    assert set(out) == {"vendor"}
    assert isinstance(out["vendor"], str)


def test_size_unknown_anomaly(monkeypatch, trace6, victim6, pool6):
    import tlextract.pipeline as pl

    def fake_extract(trace, calibration=None, hints=None):
        return ArchitectureHypothesis(encoder_count=6,
                                      encoder_size="unknown", period=1,
                                      boundaries=[], regions=[],
                                      anomalies=[])
    monkeypatch.setattr(pl, "extract_architecture", fake_extract)
    res = run_pipeline(trace6, ProbeOracle(victim6), pool6)
    assert res.degraded
    assert "size-unknown" in res.anomalies
    assert res.arch is None
