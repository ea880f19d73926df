"""Trace simulator: signature structure, jitter bounds, noise, JSONL."""

import json

import numpy as np
import pytest

from tlextract.errors import UnknownLabelError
from tlextract.finetune import ARCH_BASE, ARCH_LARGE, ArchSpec
from tlextract.tracesim import (COMMON_KID, FRAMEWORKS, VENDOR_GLUE, VENDORS,
                                build_profile, gen_trace, inject_noise,
                                intra_encoder_layout, read_trace, write_trace)

SEED = 1234


def _all_profiles(arch=ARCH_BASE):
    return [build_profile(v, f, arch, seed=SEED)
            for v in VENDORS for f in FRAMEWORKS]


def _profile_kids(profile):
    kids = {e.kid for e in profile.encoder_template}
    kids |= {e.kid for e in profile.prologue}
    kids |= {e.kid for e in profile.epilogue}
    if profile.xla_block is not None:
        kids |= set(profile.xla_block[0])
    return kids


def test_id_spaces_overlap_only_in_shared_kernel():
    profiles = _all_profiles()
    kid_sets = [_profile_kids(p) for p in profiles]
    for i in range(len(kid_sets)):
        for j in range(i + 1, len(kid_sets)):
            assert kid_sets[i] & kid_sets[j] == {COMMON_KID}


def test_profile_determinism():
    a = build_profile("acme", "graph-xla", ARCH_BASE, seed=7)
    b = build_profile("acme", "graph-xla", ARCH_BASE, seed=7)
    assert [e.kid for e in a.encoder_template] == [e.kid for e in b.encoder_template]
    assert [e.mean_ns for e in a.encoder_template] == [e.mean_ns for e in b.encoder_template]
    np.testing.assert_array_equal(a.xla_block[1], b.xla_block[1])


def test_kernels_per_encoder_multiplier():
    eager = build_profile("acme", "eager", ARCH_BASE, seed=SEED)
    assert eager.kernels_per_encoder == 40
    for fw in ("graph-xla", "graph-plain"):
        p = build_profile("acme", fw, ARCH_BASE, seed=SEED)
        ratio = p.kernels_per_encoder / eager.kernels_per_encoder
        assert 5 <= ratio <= 8


@pytest.mark.parametrize("arch", [ARCH_BASE, ARCH_LARGE], ids=["base", "large"])
def test_event_count_ratio_graph_over_eager(arch):
    for v in VENDORS:
        n_eager = len(gen_trace(build_profile(v, "eager", arch, seed=SEED), seed=1))
        for fw in ("graph-xla", "graph-plain"):
            n_graph = len(gen_trace(build_profile(v, fw, arch, seed=SEED), seed=1))
            assert 5 <= n_graph / n_eager <= 8, (v, fw, n_graph, n_eager)


def test_unique_kernel_ratio():
    def uniq(v, fw):
        t = gen_trace(build_profile(v, fw, ARCH_BASE, seed=SEED), seed=2)
        return len(set(t.kid.tolist()))

    for v in VENDORS:
        base = uniq(v, "eager")
        assert 30 <= uniq(v, "graph-xla") / base <= 50
        assert uniq(v, "graph-plain") / base >= 10


def test_unique_kernel_count_field_matches_trace():
    for p in _all_profiles():
        t = gen_trace(p, seed=3)
        assert len(set(t.kid.tolist())) == p.unique_kernel_count


def test_peak_durations():
    assert build_profile("acme", "eager", ARCH_BASE, seed=SEED).peak_mean_ns == 600_000
    assert build_profile("acme", "eager", ARCH_LARGE, seed=SEED).peak_mean_ns == 800_000
    for fw in ("graph-xla", "graph-plain"):
        assert build_profile("acme", fw, ARCH_BASE, seed=SEED).peak_mean_ns == 430_000
        large = build_profile("acme", fw, ARCH_LARGE, seed=SEED).peak_mean_ns
        assert large > 1_000_000


def test_trace_determinism_and_seed_sensitivity():
    p = build_profile("globex", "graph-plain", ARCH_BASE, seed=SEED)
    a = gen_trace(p, seed=5)
    b = gen_trace(p, seed=5)
    np.testing.assert_array_equal(a.dur_ns, b.dur_ns)
    np.testing.assert_array_equal(a.start_ns, b.start_ns)
    c = gen_trace(p, seed=6)
    assert not np.array_equal(a.dur_ns, c.dur_ns)


def test_kid_sequence_independent_of_trace_seed():
    p = build_profile("initech", "graph-xla", ARCH_BASE, seed=SEED)
    a = gen_trace(p, seed=5)
    b = gen_trace(p, seed=99)
    np.testing.assert_array_equal(a.kid, b.kid)
    assert a.knames == b.knames


def test_starts_are_zero_gap():
    t = gen_trace(build_profile("acme", "eager", ARCH_BASE, seed=SEED), seed=5)
    assert t.start_ns[0] == 0
    np.testing.assert_array_equal(t.start_ns[1:], t.start_ns[:-1] + t.dur_ns[:-1])


def test_jitter_bounds_and_xla_block_verbatim():
    p = build_profile("umbra", "graph-xla", ARCH_BASE, seed=SEED)
    t = gen_trace(p, seed=8)
    reps = ARCH_BASE.encoder_count
    lead = reps - reps // 2
    unit = len(p.encoder_template)
    means = ([e.mean_ns for e in p.prologue]
             + [e.mean_ns for e in p.encoder_template] * lead)
    block_at = len(means)
    block_durs = p.xla_block[1]
    means += [0] * len(block_durs)  # placeholder, checked separately
    means += [e.mean_ns for e in p.encoder_template] * (reps - lead)
    means += [e.mean_ns for e in p.epilogue]
    assert len(means) == len(t)
    mean_arr = np.array(means, dtype=np.float64)
    jittered = mean_arr > 0
    ratio = t.dur_ns[jittered] / mean_arr[jittered]
    assert ratio.min() >= 0.9 - 1e-9 and ratio.max() <= 1.1 + 1e-9
    np.testing.assert_array_equal(
        t.dur_ns[block_at:block_at + len(block_durs)], block_durs)
    assert block_durs.min() >= 1000 and block_durs.max() < 4000


def test_xla_block_is_arch_independent_and_xla_only():
    base = build_profile("acme", "graph-xla", ARCH_BASE, seed=SEED)
    large = build_profile("acme", "graph-xla", ARCH_LARGE, seed=SEED)
    np.testing.assert_array_equal(base.xla_block[1], large.xla_block[1])
    assert base.xla_block[0] == large.xla_block[0]
    assert build_profile("acme", "eager", ARCH_BASE, seed=SEED).xla_block is None
    assert build_profile("acme", "graph-plain", ARCH_BASE, seed=SEED).xla_block is None


def test_vendor_glue_density():
    for v in VENDORS:
        for fw in FRAMEWORKS:
            p = build_profile(v, fw, ARCH_BASE, seed=SEED)
            glue = sum(1 for e in p.encoder_template
                       if e.kname in ("vendor_glue", "vendor_pad"))
            assert glue == VENDOR_GLUE[v]
            assert len(p.encoder_template) == p.kernels_per_encoder + glue
            # each attention site hosts exactly one helper; the rest trail
            # the feed-forward section as the vendor's duration ramp
            site = [e.tag for e in p.encoder_template
                    if e.kname == "vendor_glue"]
            assert sorted(site) == ["k", "q", "softmax", "v"]
            ramp = [e for e in p.encoder_template
                    if e.kname == "vendor_pad"]
            assert len(ramp) == VENDOR_GLUE[v] - 4
            assert all(e.tag == "ff" for e in ramp)
            durs = [e.mean_ns for e in ramp]
            assert durs == sorted(durs)


def test_layout_annotation():
    for p in _all_profiles():
        lay = intra_encoder_layout(p)
        assert len(lay.tags) == len(p.encoder_template)
        assert lay.ff_over_attention > 2
        q, k, v = (lay.block_totals[x] for x in "qkv")
        assert q == k == v
        assert lay.block_totals["score"] < q
        assert lay.block_totals["softmax"] <= lay.block_totals["score"]
        assert lay.block_totals["layer_norm"] <= lay.block_totals["score"]


def test_inject_noise_exact_amplitude():
    p = build_profile("acme", "eager", ARCH_BASE, seed=SEED)
    t = gen_trace(p, seed=5)
    noisy = inject_noise(t, 40, 45.0, seed=3)
    diff = noisy.dur_ns.astype(np.int64) - t.dur_ns.astype(np.int64)
    changed = np.nonzero(diff)[0]
    assert changed.size == 40
    np.testing.assert_array_equal(np.abs(diff[changed]), 45_000)
    np.testing.assert_array_equal(noisy.start_ns, t.start_ns)
    np.testing.assert_array_equal(noisy.kid, t.kid)
    assert noisy.provenance["noise"] == "n=40,amp_us=45"
    assert t.provenance["noise"] == "none"  # original untouched


def test_inject_noise_sign_flips_at_floor():
    p = build_profile("acme", "eager", ARCH_BASE, seed=SEED)
    t = gen_trace(p, seed=5)
    t.dur_ns[:] = 10  # every event far below the amplitude
    noisy = inject_noise(t, len(t), 45.0, seed=3)
    diff = noisy.dur_ns - t.dur_ns
    np.testing.assert_array_equal(diff, 45_000)


def test_inject_noise_validation():
    t = gen_trace(build_profile("acme", "eager", ARCH_BASE, seed=SEED), seed=5)
    with pytest.raises(ValueError):
        inject_noise(t, len(t) + 1, 45.0, seed=0)
    with pytest.raises(ValueError):
        inject_noise(t, 4, -1.0, seed=0)


def test_noise_determinism():
    t = gen_trace(build_profile("acme", "eager", ARCH_BASE, seed=SEED), seed=5)
    a = inject_noise(t, 40, 45.0, seed=3)
    b = inject_noise(t, 40, 45.0, seed=3)
    np.testing.assert_array_equal(a.dur_ns, b.dur_ns)
    c = inject_noise(t, 40, 45.0, seed=4)
    assert not np.array_equal(a.dur_ns, c.dur_ns)


def test_jsonl_roundtrip(tmp_path):
    p = build_profile("umbra", "graph-xla", ARCH_BASE, seed=SEED)
    t = gen_trace(p, seed=5)
    path = tmp_path / "trace.jsonl"
    write_trace(t, path)
    back = read_trace(path)
    np.testing.assert_array_equal(back.kid, t.kid)
    np.testing.assert_array_equal(back.dur_ns, t.dur_ns)
    np.testing.assert_array_equal(back.start_ns, t.start_ns)
    assert back.knames == t.knames
    assert back.provenance == t.provenance

    victim = tmp_path / "victim.jsonl"
    write_trace(t, victim, include_provenance=False)
    assert read_trace(victim).provenance is None


def test_jsonl_byte_stability_and_field_order(tmp_path):
    t = gen_trace(build_profile("acme", "eager", ARCH_BASE, seed=SEED), seed=5)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_trace(t, p1)
    write_trace(t, p2)
    assert p1.read_bytes() == p2.read_bytes()
    lines = p1.read_text().splitlines()
    assert lines[0].startswith('{"provenance":')
    assert lines[1].startswith('{"seq":0,"start_ns":0,"dur_ns":')
    row = json.loads(lines[1])
    assert list(row) == ["seq", "start_ns", "dur_ns", "kid", "kname"]


def test_unknown_labels_rejected():
    with pytest.raises(UnknownLabelError):
        build_profile("nvidia", "eager", ARCH_BASE, seed=SEED)
    with pytest.raises(UnknownLabelError):
        build_profile("acme", "jit", ARCH_BASE, seed=SEED)


def test_core_vectors_validation_and_extra_block():
    with pytest.raises(ValueError):
        build_profile("acme", "eager", ARCH_BASE, seed=SEED, core_vectors=2)
    p4 = build_profile("acme", "eager", ARCH_BASE, seed=SEED, core_vectors=4)
    names = {e.kname for e in p4.encoder_template}
    assert "extra_proj_0" in names
    extra_kid = next(e.kid for e in p4.encoder_template
                     if e.kname == "extra_proj_0")
    assert extra_kid in p4.matmul_kids


def test_arbitrary_encoder_counts():
    for n in (2, 7, 31):
        arch = ArchSpec(n, 768, 12)
        p = build_profile("globex", "eager", arch, seed=SEED)
        t = gen_trace(p, seed=1)
        expected = len(p.prologue) + n * len(p.encoder_template) + len(p.epilogue)
        assert len(t) == expected
