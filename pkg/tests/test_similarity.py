"""Similarity analytics: diff maps, sign, correlation, attention, PGM."""

import hashlib
import math

import numpy as np
import pytest

from tlextract import finetune as ft
from tlextract import pgm
from tlextract import similarity as sim
from tlextract.checkpoint import WeightTensor
from tlextract.errors import ShapeMismatchError, UndefinedCorrelationError

ARCH = ft.ArchSpec(2, 64, 4, has_task_layer=False)


def test_diff_map_trivial_and_metrics():
    a = np.array([[1.0, -2.0], [0.5, 3.0]])
    same = sim.weight_diff_map(a, a)
    assert not same.values.any()
    b = np.array([[1.5, 2.0], [0.0, -3.0]])
    d1 = sim.weight_diff_map(a, b, "abs_diff")
    assert np.allclose(d1.values, [[0.5, 4.0], [0.5, 6.0]])
    d2 = sim.weight_diff_map(a, b, "abs_of_abs_diff")
    assert np.allclose(d2.values, [[0.5, 0.0], [0.5, 0.0]])
    with pytest.raises(ShapeMismatchError):
        sim.weight_diff_map(a, b[:1])
    with pytest.raises(ValueError):
        sim.weight_diff_map(a, b, "nope")


def test_diff_stats_values():
    zeros = sim.DiffMap(np.zeros((3, 3)), "abs_diff")
    st = sim.diff_stats(zeros)
    assert st.mean == 0.0 and st.max == 0.0
    assert st.fraction_below(1e-9) == 1.0
    flat = sim.diff_stats(sim.DiffMap(np.full((4, 4), 0.2), "abs_diff"))
    assert flat.max == 0.2 and flat.mean == pytest.approx(0.2)
    assert flat.fraction_below(0.2) == 0.0
    with pytest.raises(ValueError):
        sim.diff_stats(sim.DiffMap(np.zeros((0,)), "abs_diff"))


def test_diff_stats_symmetry_and_band_examples():
    base = ft.gen_base(ARCH, 1)
    victim = ft.apply_finetune(base, ft.DeltaModel(), 2)
    ab = sim.diff_stats(sim.weight_diff_map(base.tensors[0], victim.tensors[0]))
    ba = sim.diff_stats(sim.weight_diff_map(victim.tensors[0], base.tensors[0]))
    assert ab.mean == ba.mean and ab.max == ba.max
    assert ab.mean < 0.002
    nvidia = ft.apply_finetune(base, ft.nvidia_style(), 3)
    st = sim.diff_stats(sim.weight_diff_map(base.tensors[0], nvidia.tensors[0]))
    assert st.mean == pytest.approx(0.025, rel=0.10)


def test_cross_vendor_band():
    # full-width tensors so the sampling noise sits inside the band
    arch = ft.ArchSpec(1, 768, 12, has_task_layer=False)
    a = ft.gen_base(arch, 4)
    b = ft.gen_independent(arch, 5)
    for name, ta, tb in sim.checkpoint_pairs(a, b):
        st = sim.diff_stats(sim.weight_diff_map(ta, tb))
        assert 0.075 <= st.mean <= 0.1, name


def test_stats_csv_shape():
    a = WeightTensor("w", np.zeros((2, 2), np.float32))
    b = WeightTensor("w", np.full((2, 2), 0.0005, np.float32))
    out = sim.stats_csv([("w", a, b)])
    lines = out.strip().split("\n")
    assert lines[0] == "tensor,metric,mean,max,frac_below_0.001,frac_below_0.002"
    cells = lines[1].split(",")
    assert cells[0] == "w" and cells[1] == "abs_diff"
    assert float(cells[2]) == pytest.approx(0.0005)
    assert float(cells[4]) == 1.0 and float(cells[5]) == 1.0


def test_sign_agreement():
    a = np.array([1.0, -2.0, 0.0, 3.0])
    assert sim.sign_agreement(a, a) == 1.0
    assert sim.sign_agreement(a, -a) == pytest.approx(0.25)  # zero stays +
    b = np.array([1.0, 2.0, -0.0, -3.0])
    assert sim.sign_agreement(a, b) == pytest.approx(0.5)
    with pytest.raises(ShapeMismatchError):
        sim.sign_agreement(a, b[:2])


def test_sign_agreement_negative_zero_counts_positive():
    assert sim.sign_agreement(np.array([0.0]), np.array([-0.0])) == 1.0


def test_pearson_basic():
    x = np.array([1.0, 2.0, 3.0])
    assert sim.pearson(x, x) == pytest.approx(1.0, abs=1e-12)
    assert sim.pearson(x, -x) == pytest.approx(-1.0, abs=1e-12)
    # frozen oracle: r = 15 / sqrt(2 * 114/9 * 9) = 15/sqrt(228)
    r = sim.pearson([1, 2, 3], [2, 4, 7])
    assert r == pytest.approx(15.0 / math.sqrt(228.0), abs=1e-12)
    assert r == pytest.approx(np.corrcoef([1, 2, 3], [2, 4, 7])[0, 1], abs=1e-12)


def test_pearson_errors():
    with pytest.raises(UndefinedCorrelationError):
        sim.pearson([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    with pytest.raises(UndefinedCorrelationError):
        sim.pearson([1.0], [2.0])
    with pytest.raises(ShapeMismatchError):
        sim.pearson([1.0, 2.0], [1.0, 2.0, 3.0])


def test_pearson_scale_shift_invariance():
    r = np.random.default_rng(8)
    x = r.normal(size=200)
    y = r.normal(size=200) + 0.3 * x
    base = sim.pearson(x, y)
    for a, b in [(2.0, 0.0), (0.5, -3.0), (1e6, 1e-3), (3.7, 12.0)]:
        assert sim.pearson(a * x + b, y) == pytest.approx(base, abs=1e-12)
    assert sim.pearson(-2.0 * x, y) == pytest.approx(-base, abs=1e-12)


def test_attention_forward_uniform_and_single():
    h = sim.AttentionHead(np.zeros((8, 2)), np.zeros((8, 2)),
                          np.eye(8)[:, :2], alpha=math.sqrt(2))
    x = np.random.default_rng(0).normal(size=(5, 8))
    z, p = sim.attention_forward(h, x)
    assert np.allclose(p, 1.0 / 5)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
    # single token attends to itself
    z1, p1 = sim.attention_forward(h, x[:1])
    assert p1.shape == (1, 1) and p1[0, 0] == pytest.approx(1.0)
    with pytest.raises(ShapeMismatchError):
        sim.attention_forward(h, np.zeros((3, 9)))


def test_attention_forward_matches_bruteforce():
    r = np.random.default_rng(1)
    hidden, d, tokens = 6, 2, 4
    head = sim.AttentionHead(r.normal(size=(hidden, d)), r.normal(size=(hidden, d)),
                             r.normal(size=(hidden, d)), alpha=math.sqrt(d))
    x = r.normal(size=(tokens, hidden))
    z, p = sim.attention_forward(head, x)
    # straight-line recomputation with scalar loops
    q = [[sum(x[i][a] * head.wq[a][j] for a in range(hidden)) for j in range(d)]
         for i in range(tokens)]
    k = [[sum(x[i][a] * head.wk[a][j] for a in range(hidden)) for j in range(d)]
         for i in range(tokens)]
    v = [[sum(x[i][a] * head.wv[a][j] for a in range(hidden)) for j in range(d)]
         for i in range(tokens)]
    for i in range(tokens):
        logits = [sum(q[i][a] * k[j][a] for a in range(d)) / head.alpha
                  for j in range(tokens)]
        es = [math.exp(l) for l in logits]
        probs = [e / sum(es) for e in es]
        for j in range(tokens):
            assert p[i, j] == pytest.approx(probs[j], abs=1e-9)
        for c in range(d):
            zz = sum(probs[j] * v[j][c] for j in range(tokens))
            assert z[i, c] == pytest.approx(zz, abs=1e-9)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_head_confidence():
    assert sim.head_confidence(np.full((4, 4), 0.25)) == pytest.approx(0.25)
    assert sim.head_confidence(np.eye(6)) == pytest.approx(1.0)
    r = np.random.default_rng(2)
    batch = r.dirichlet(np.ones(5), size=(8, 5))  # (8 inputs, 5 rows, 5 cols)
    got = sim.head_confidence(batch)
    want = np.mean([batch[b][i].max() for b in range(8) for i in range(5)])
    assert got == pytest.approx(want)
    # permutation invariance over query rows
    perm = batch[:, ::-1, :]
    assert sim.head_confidence(perm) == pytest.approx(got)


def test_head_of_slices_columns():
    ck = ft.gen_base(ARCH, 9)
    h = sim.head_of(ck, 1, 2, heads=4)
    assert h.wq.shape == (64, 16)
    assert h.alpha == math.sqrt(16)
    full = ck.tensor("enc.01.attn.wq").data
    assert np.array_equal(h.wq, full[:, 32:48].astype(np.float64))


def test_confidence_correlation_orderings():
    base = ft.gen_base(ARCH, 10)
    victim = ft.apply_finetune(base, ft.DeltaModel(), 11)
    other = ft.gen_independent(ARCH, 12)
    x = sim.attention_inputs(ARCH.hidden, count=24, tokens=8, seed=13)
    selfr = sim.confidence_correlation(base, base, x, heads=ARCH.heads)
    assert selfr.shape == (2, 4)
    assert np.allclose(selfr, 1.0, atol=1e-12)
    near = sim.confidence_correlation(base, victim, x, heads=ARCH.heads)
    far = sim.confidence_correlation(base, other, x, heads=ARCH.heads)
    assert near.mean() > far.mean()
    assert far.mean() < 0.5
    with pytest.raises(UndefinedCorrelationError):
        sim.confidence_correlation(base, victim, x[:1], heads=ARCH.heads)


def test_confidence_correlation_per_query_axis():
    base = ft.gen_base(ARCH, 14)
    victim = ft.apply_finetune(base, ft.DeltaModel(), 15)
    x = sim.attention_inputs(ARCH.hidden, count=3, tokens=6, seed=16)
    r = sim.confidence_correlation(base, victim, x, heads=ARCH.heads, per_query=True)
    assert r.shape == (2, 4)
    assert (r > 0.9).all()


def test_heatmap_rendering(tmp_path):
    black = tmp_path / "black.pgm"
    sim.heatmap_render(sim.DiffMap(np.zeros((16, 16)), "abs_diff"), black)
    img = pgm.read_pgm(black)
    assert img.shape == (16, 16) and not img.any()
    white = tmp_path / "white.pgm"
    sim.heatmap_render(sim.DiffMap(np.full((4, 8), 0.2), "abs_diff"), white)
    img = pgm.read_pgm(white)
    assert (img == 255).all()
    # over the ceiling still clamps to white
    sim.heatmap_render(sim.DiffMap(np.full((4, 4), 3.0), "abs_diff"), white)
    assert (pgm.read_pgm(white) == 255).all()
    # linear in between
    mid = tmp_path / "mid.pgm"
    sim.heatmap_render(sim.DiffMap(np.full((2, 2), 0.1), "abs_diff"), mid)
    assert (pgm.read_pgm(mid) == round(0.5 * 255)).all()


def test_heatmap_downsample_and_determinism(tmp_path):
    v = np.zeros((5, 6))
    v[:2, :2] = 0.2  # one white-ish block under 2x downsample
    p1, p2 = tmp_path / "a.pgm", tmp_path / "b.pgm"
    sim.heatmap_render(sim.DiffMap(v, "abs_diff"), p1, downsample=2)
    img = pgm.read_pgm(p1)
    assert img.shape == (3, 3)
    assert img[0, 0] == 255 and img[2, 2] == 0
    sim.heatmap_render(sim.DiffMap(v, "abs_diff"), p2, downsample=2)
    assert hashlib.sha256(p1.read_bytes()).digest() == hashlib.sha256(p2.read_bytes()).digest()
    with pytest.raises(ValueError):
        sim.heatmap_render(sim.DiffMap(v, "abs_diff"), p1, downsample=0)
    with pytest.raises(ValueError):
        sim.heatmap_render(sim.DiffMap(np.zeros(3), "abs_diff"), p1)
