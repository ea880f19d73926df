"""Acceptance gate: one test (one pass/fail line under -v) per headline
guarantee of the toolkit.  Each test is self-contained apart from the
session corpus fixtures in conftest.py and re-derives its expectations
from first principles rather than from the code under test.
"""

import json
import math
import time

import numpy as np
import pytest

from tlextract import floatbits as fb
from tlextract.archextract import extract_architecture
from tlextract.checkpoint import Checkpoint, WeightTensor
from tlextract.cnn import (C2, FLAT, POOL2_OUT, gradient_check, init_model,
                           kfold_evaluate)
from tlextract.extraction import ProbeOracle, extract, plan_bits, verify
from tlextract.finetune import (ARCH_BASE, ARCH_LARGE, ArchSpec, DeltaModel,
                                apply_finetune, gen_base, gen_independent)
from tlextract.modelpool import ModelPool, pool_filename
from tlextract.pipeline import result_json, run_pipeline
from tlextract.raster import TraceImage
from tlextract.rng import stream
from tlextract.similarity import (attention_inputs, checkpoint_pairs,
                                  confidence_correlation, pearson,
                                  sign_agreement, weight_diff_map)
from tlextract.sweeps import (nonincreasing_within, sweep_classifier,
                              sweep_detector)
from tlextract.tracesim import (FRAMEWORKS, VENDORS, build_profile,
                                gen_trace)

META = {"vendor": "acme", "framework": "eager", "arch": "probe"}


# ---------------------------------------------------------------------------
# C1: bit-level float plumbing


def test_c1_ieee_roundtrip_million_patterns_per_format():
    t0 = time.perf_counter()
    for fmt in (fb.F32, fb.F16, fb.BF16):
        r = np.random.default_rng(0xC1 + fmt.width)
        bits = r.integers(0, 1 << fmt.width, size=1_000_000,
                          dtype=np.uint64).tolist()
        for b in bits:
            if fb.compose_bits(fb.decompose_bits(b, fmt)) != b:
                pytest.fail(f"{fmt.name}: pattern {b:#x} did not round-trip")
    # place_value == 2^(e - bias - k), checked exactly against pow
    r = np.random.default_rng(0xC1)
    for fmt in (fb.F32, fb.F16, fb.BF16):
        es = r.integers(1, (1 << fmt.exponent_bits) - 1, size=2_000)
        ks = r.integers(1, fmt.fraction_bits + 1, size=2_000)
        for e, k in zip(es.tolist(), ks.tolist()):
            assert fb.place_value(e, k, fmt) == 2.0 ** (e - fmt.bias - k)
    # anchor values: exponent of 0.018 names 2^-6; its bit 4 is 2^-10
    fields = fb.decompose(0.018, fb.F32)
    assert 2.0 ** (fields.exponent - fb.F32.bias) == 0.015625
    assert fb.place_value(fields.exponent, 4, fb.F32) == 0.0009765625
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0, f"C1 took {elapsed:.1f}s (budget 10s)"


# ---------------------------------------------------------------------------
# C2: the two-probe worked example


def test_c2_worked_example_two_probes_recover_within_window():
    fields = fb.decompose(0.018, fb.F32)
    assert fields.exponent == 121
    assert fb.fraction_msb(fields) == 3

    base = Checkpoint([WeightTensor(
        "enc.00.attn.wq", np.array([[0.018]], dtype=np.float32))], META)
    victim = Checkpoint([WeightTensor(
        "enc.00.attn.wq", np.array([[0.01908]], dtype=np.float32))], META)

    plan = plan_bits(base, policy="worked-example")
    probed = plan.tensors["enc.00.attn.wq"].probe_bits[0]
    assert sorted(int(b) for b in probed) == [4, 5]

    oracle = ProbeOracle(victim, error_rate=0.0)
    clone, report = extract(plan, oracle, base)
    got = float(clone.tensor("enc.00.attn.wq").data[0, 0])
    assert abs(got - 0.01908) <= 0.002
    assert report.probes_issued == 2


# ---------------------------------------------------------------------------
# C3: pruning accounting at full model scale


def test_c3_pruning_accounting_on_base_scale_checkpoint():
    t0 = time.perf_counter()
    base = gen_base(ARCH_BASE, seed=201, small_weight_fraction=0.90)
    victim = apply_finetune(base, DeltaModel(sigma_encoder=0.001), seed=202)

    plan = plan_bits(base, policy="worked-example")
    clone, _ = extract(plan, ProbeOracle(victim, seed=203), base)
    report = verify(clone, victim, plan)

    # exactly 90% of each tensor is excluded, by construction
    expected_excluded = sum(
        math.floor(0.90 * base.tensor(n).data.size) for n in base.names())
    assert report.weights_excluded == expected_excluded
    ratio = report.weights_excluded / report.weights_total
    assert abs(ratio - 0.90) < 1e-5
    assert report.bits_probed <= 2 * report.weights_probed
    assert report.raw_bit_exclusion_ratio is not None
    assert report.correct_bit_exclusion_ratio is not None
    assert 0.0 < report.correct_bit_exclusion_ratio \
        < report.raw_bit_exclusion_ratio

    # independent full scan: |clone - victim| <= 0.002 and same sign bit
    correct = 0
    total = 0
    for name in base.names():
        c = clone.tensor(name).data
        v = victim.tensor(name).data
        close = np.abs(c.astype(np.float64) - v.astype(np.float64)) <= 0.002
        same_sign = np.signbit(c) == np.signbit(v)
        correct += int((close & same_sign).sum())
        total += c.size
    assert report.weights_total == total
    assert report.correct_fraction == correct / total

    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0, f"C3 took {elapsed:.1f}s (budget 60s)"


# ---------------------------------------------------------------------------
# C4: architecture recovery across the full grid


def test_c4_encoder_count_recovery_and_size_classification():
    t0 = time.perf_counter()
    failures = []
    for count in range(2, 33):
        arch = ArchSpec(count, 768, 12)
        for framework in FRAMEWORKS:
            for vendor in VENDORS:
                profile = build_profile(vendor, framework, arch,
                                        seed=400 + count)
                trace = gen_trace(profile, seed=401 + count)
                h = extract_architecture(trace, hints=profile)
                if h.encoder_count != count:
                    failures.append((vendor, framework, count,
                                     h.encoder_count))
    assert not failures, f"count recovery misses: {failures[:10]}"

    for arch, want in ((ARCH_BASE, "base-like"), (ARCH_LARGE, "large-like")):
        profile = build_profile("acme", "eager", arch, seed=4)
        h = extract_architecture(gen_trace(profile, seed=5))
        assert h.encoder_size == want, (arch.label, h.encoder_size)

    elapsed = time.perf_counter() - t0
    assert elapsed < 300.0, f"C4 took {elapsed:.1f}s (budget 300s)"


# ---------------------------------------------------------------------------
# C5: noise sweeps


def test_c5_noise_sweeps_nonincreasing(vendor_model):
    detector = sweep_detector("acme", "eager", ARCH_BASE,
                              trials=50, seed=31)
    assert all(p.trials >= 50 for p in detector)
    assert detector[0].accuracy >= 0.9  # light noise barely hurts
    assert nonincreasing_within(detector, slack=0.03)

    cases = [(v, "eager", ARCH_BASE) for v in VENDORS]
    classifier = sweep_classifier(vendor_model, "vendor", cases,
                                  trials=50, seed=32)
    assert all(p.trials >= 50 for p in classifier)
    assert classifier[0].accuracy >= 0.9
    assert nonincreasing_within(classifier, slack=0.03)


# ---------------------------------------------------------------------------
# C6: classifier correctness


def test_c6_gradient_check_and_feature_audit():
    assert C2 * POOL2_OUT * POOL2_OUT == 3600 == FLAT
    g = stream(61, "c6-image")
    ys = (g.uniform(300) * 1024).astype(np.int64)
    xs = (g.uniform(300) * 1024).astype(np.int64)
    image = TraceImage(xs=xs, ys=ys, vendor="acme")
    model = init_model("vendor", ["acme", "globex", "umbra"], seed=62,
                       bias_scale=0.05)
    res = gradient_check(model, image, "globex", epsilon=1e-6,
                         min_params=200, seed=63)
    assert res.max_rel_error <= 1e-5, res.per_tensor


def test_c6_five_fold_cv_on_680_trace_corpus(corpus_images):
    t0 = time.perf_counter()
    assert len(corpus_images) == 680
    floors = {"framework": 0.95, "vendor": 0.90, "encoder_count": 0.85}
    means = {}
    for task, floor in floors.items():
        rep = kfold_evaluate(corpus_images, task, k=5, seed=13)
        assert rep.fold_sizes == [136] * 5
        means[task] = sum(rep.accuracies) / len(rep.accuracies)
        assert means[task] >= floor, (task, rep.accuracies)
    elapsed = time.perf_counter() - t0
    assert elapsed < 1800.0, f"C6 CV took {elapsed:.0f}s (budget 1800s)"
    print(f"\nC6 CV accuracy: framework {means['framework']:.4f}, "
          f"vendor {means['vendor']:.4f}, "
          f"encoder_count {means['encoder_count']:.4f} "
          f"in {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# C7: similarity thresholds


def test_c7_similarity_thresholds():
    base = gen_base(ARCH_BASE, seed=701)
    finetuned = apply_finetune(base, DeltaModel(), seed=702)
    independent = gen_independent(ARCH_BASE, seed=703)

    encoder_means = []
    for name, ta, tb in checkpoint_pairs(base, finetuned):
        mean = float(weight_diff_map(ta, tb, "abs_diff").values.mean())
        if name.startswith("enc."):
            encoder_means.append(mean)
            assert mean < 0.002, (name, mean)
        else:
            last_layer_mean = mean
    assert last_layer_mean >= 10 * max(encoder_means)

    for name, ta, tb in checkpoint_pairs(base, independent):
        if not name.startswith("enc."):
            continue
        mean = float(weight_diff_map(ta, tb, "abs_diff").values.mean())
        assert 0.075 <= mean <= 0.1, (name, mean)

    for name, ta, tb in checkpoint_pairs(base, finetuned):
        a, b = ta.data.reshape(-1), tb.data.reshape(-1)
        big = np.abs(a) >= 0.01
        agreement = sign_agreement(a[big], b[big])
        assert agreement >= 0.99, (name, agreement)


# ---------------------------------------------------------------------------
# C8: confidence correlation separates fine-tuned from independent


def test_c8_confidence_correlation_twenty_seeds():
    assert pearson(np.arange(50.0), np.arange(50.0)) == pytest.approx(
        1.0, abs=1e-12)
    x = stream(81, "c8").gaussian(200)
    assert pearson(x, 3.0 * x + 7.0) == pytest.approx(1.0, abs=1e-12)

    arch = ArchSpec(2, 64, 4)
    for seed in range(20):
        base = gen_base(arch, seed=1000 + seed)
        finetuned = apply_finetune(base, DeltaModel(), seed=2000 + seed)
        independent = gen_independent(arch, seed=3000 + seed)
        inputs = attention_inputs(hidden=64, count=4, tokens=8,
                                  seed=4000 + seed)
        r_ft = confidence_correlation(base, finetuned, inputs,
                                      heads=4).mean()
        r_ind = confidence_correlation(base, independent, inputs,
                                       heads=4).mean()
        assert r_ft > r_ind, (seed, r_ft, r_ind)


# ---------------------------------------------------------------------------
# C9: end-to-end determinism and pool selection


ARCH9 = ArchSpec(6, 768, 4)


@pytest.fixture(scope="module")
def pool9(tmp_path_factory):
    """All twelve (vendor, framework) bases of the same architecture."""
    pool = ModelPool.scan(tmp_path_factory.mktemp("pool9"))
    bases = {}
    for i, vendor in enumerate(VENDORS):
        for j, framework in enumerate(FRAMEWORKS):
            ck = gen_base(ARCH9, seed=500 + 3 * i + j,
                          metadata={"vendor": vendor,
                                    "framework": framework})
            pool.add(ck)
            bases[vendor, framework] = ck
    return pool, bases


def test_c9_deterministic_json_and_pool_selection(pool9):
    pool, bases = pool9
    hits = 0
    first_json = None
    for run in range(20):
        vendor = VENDORS[(run * 5) % len(VENDORS)]
        framework = FRAMEWORKS[(run * 7) % len(FRAMEWORKS)]
        victim = apply_finetune(bases[vendor, framework], DeltaModel(),
                                seed=900 + run)
        profile = build_profile(vendor, framework, ARCH9, seed=700 + run)
        trace = gen_trace(profile, seed=701 + run)
        res = run_pipeline(trace, ProbeOracle(victim, seed=run), pool,
                           victim=victim)
        assert not res.degraded, (run, res.anomalies)
        if res.selected_path.name == pool_filename(vendor, framework,
                                                   ARCH9.label):
            hits += 1
        if run == 0:
            first_json = result_json(res)
            repeat = run_pipeline(trace, ProbeOracle(victim, seed=run),
                                  pool, victim=victim)
            assert result_json(repeat) == first_json  # byte-identical
    assert hits == 20
    parsed = json.loads(first_json)
    assert parsed["degraded"] is False
    assert "timing_ms" not in parsed
