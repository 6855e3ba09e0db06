import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, ndimage

from cpcl.data import VolumeSample, read_volume
from cpcl.errors import UsageError, ValidationError
from cpcl.evaluation import (MetricsReport, betainc_reg, boundary, compare_reports,
                             evaluate_split, overlap_metrics, paired_t_test,
                             sliding_window_infer, surface_metrics, window_starts)
from cpcl.segnet import SegNet, UNetConfig, init_weights
from cpcl.tensor import Tensor

# -- oracles -------------------------------------------------------------------


def boundary_oracle(mask):
    m = np.asarray(mask, bool)
    out = np.zeros_like(m)
    for idx in zip(*np.nonzero(m)):
        for ax in range(3):
            for step in (-1, 1):
                n = list(idx)
                n[ax] += step
                if not 0 <= n[ax] < m.shape[ax] or not m[tuple(n)]:
                    out[idx] = True
    return out


def percentile_oracle(values, q):
    v = np.sort(values)
    pos = (len(v) - 1) * q / 100.0
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (v[hi] - v[lo]) * (pos - lo)


def surface_oracle(a, b):
    pa = np.argwhere(boundary_oracle(a)).astype(np.float64)
    pb = np.argwhere(boundary_oracle(b)).astype(np.float64)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return percentile_oracle(pooled, 95), pooled.mean(), pooled.max()


def t_pdf(x, df):
    c = math.exp(math.lgamma((df + 1) / 2) - math.lgamma(df / 2)) / math.sqrt(df * math.pi)
    return c * (1 + x * x / df) ** (-(df + 1) / 2)


def t_p_oracle(t, df):
    tail, _ = integrate.quad(t_pdf, abs(t), np.inf, args=(df,))
    return 2 * tail


def random_blob(rng, n):
    noise = ndimage.gaussian_filter(rng.normal(size=(n, n, n)), 1.5)
    return noise > np.quantile(noise, rng.uniform(0.6, 0.9))


# -- sliding window --------------------------------------------------------------

def position_model(_weights, x):
    """Cheap stand-in whose output depends on where a voxel sits inside the window."""
    k, _, d, h, w = x.shape
    z, y, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    logit = x.data[:, 0] * 0.7 + 0.05 * (z - 0.3 * y + 0.2 * xx)
    fg = 1.0 / (1.0 + np.exp(-logit))
    return None, None, Tensor(np.stack([1 - fg, fg], axis=1))


def naive_window_oracle(model, vol, patch, stride):
    starts = [window_starts(s, patch, stride) for s in vol.shape]
    cache = {}

    def window(o):
        if o not in cache:
            a, b, c = o
            x = vol[a:a + patch, b:b + patch, c:c + patch].astype(np.float32)
            cache[o] = model(None, Tensor(x[None, None]))[2].data[0].astype(np.float64)
        return cache[o]

    out = np.zeros((2,) + vol.shape)
    for z in range(vol.shape[0]):
        cz = [s for s in starts[0] if s <= z < s + patch]
        for y in range(vol.shape[1]):
            cy = [s for s in starts[1] if s <= y < s + patch]
            for x in range(vol.shape[2]):
                cx = [s for s in starts[2] if s <= x < s + patch]
                vals = [window((a, b, c))[:, z - a, y - b, x - c] for a in cz for b in cy for c in cx]
                out[:, z, y, x] = np.mean(vals, axis=0)
    return out


def test_window_starts():
    assert window_starts(48, 24, 12) == [0, 12, 24]
    assert window_starts(50, 24, 12) == [0, 12, 24, 26]
    assert window_starts(24, 24, 12) == [0]
    with pytest.raises(ValidationError):
        window_starts(10, 12, 4)


def test_single_window_equals_forward():
    state = init_weights(UNetConfig(base_channels=4, depth=2), 0)
    net = SegNet(state.config)
    vol = np.random.default_rng(0).normal(size=(16, 16, 16)).astype(np.float32)
    probs = sliding_window_infer(net, state.student, vol, 16, 8)
    direct = net(state.student, Tensor(vol[None, None]))[2].data[0]
    assert probs.tobytes() == direct.tobytes()


def test_constant_model_gives_constant_map():
    def const(_w, x):
        p = np.empty((x.shape[0], 2) + x.shape[2:], np.float32)
        p[:, 0], p[:, 1] = 0.3, 0.7
        return None, None, Tensor(p)

    probs = sliding_window_infer(const, None, np.zeros((20, 18, 16)), 8, 3)
    np.testing.assert_array_equal(probs[1], np.float32(0.7))
    np.testing.assert_array_equal(probs[0], np.float32(0.3))


def test_overlap_matches_naive_oracle():
    vol = np.random.default_rng(1).normal(size=(48, 48, 48)).astype(np.float32)
    got = sliding_window_infer(position_model, None, vol, 24, 12)
    ref = naive_window_oracle(position_model, vol, 24, 12)
    np.testing.assert_allclose(got, ref, atol=1e-6, rtol=0)
    np.testing.assert_allclose(got.sum(axis=0), 1.0, atol=1e-6)


def test_overlap_matches_oracle_with_clamped_edge():
    state = init_weights(UNetConfig(base_channels=4, depth=2), 2)
    net = SegNet(state.config)
    vol = np.random.default_rng(2).normal(size=(20, 16, 18)).astype(np.float32)

    def model(_w, x):
        return net(state.student, x)

    got = sliding_window_infer(model, None, vol, 8, 5)
    np.testing.assert_allclose(got, naive_window_oracle(model, vol, 8, 5), atol=1e-6, rtol=0)


def test_patch_larger_than_volume():
    with pytest.raises(ValidationError):
        sliding_window_infer(position_model, None, np.zeros((8, 8, 8)), 16, 8)


# -- overlap metrics -------------------------------------------------------------

def test_overlap_closed_forms():
    a = np.zeros((4, 4, 4), bool)
    a[:2, :2, :2] = True
    assert overlap_metrics(a, a) == (1.0, 1.0)
    b = np.zeros_like(a)
    b[2:, 2:, 2:] = True
    assert overlap_metrics(a, b) == (0.0, 0.0)
    c = np.zeros_like(a)
    c[1:3, :2, :2] = True
    assert overlap_metrics(a, c) == (0.5, 1 / 3)
    assert overlap_metrics(np.zeros_like(a), np.zeros_like(a)) == (1.0, 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_overlap_properties(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((5, 5, 5)) < 0.4, rng.random((5, 5, 5)) < 0.4
    d, j = overlap_metrics(a, b)
    assert 0 <= j <= d <= 1
    assert j == pytest.approx(d / (2 - d))
    perm = rng.permutation(a.size)
    assert overlap_metrics(a.ravel()[perm], b.ravel()[perm]) == (d, j)


# -- surface metrics -------------------------------------------------------------

def test_surface_identical_masks():
    m = random_blob(np.random.default_rng(0), 12)
    r = surface_metrics(m, m)
    assert (r.hd95, r.asd, r.undefined) == (0.0, 0.0, False)


def test_surface_single_voxels():
    a, b = np.zeros((8, 8, 8), bool), np.zeros((8, 8, 8), bool)
    a[2, 4, 4] = True
    b[5, 4, 4] = True
    r = surface_metrics(a, b)
    assert (r.hd95, r.asd) == (3.0, 3.0)


def test_surface_empty_sentinel():
    a = np.zeros((4, 5, 6), bool)
    b = a.copy()
    b[1, 1, 1] = True
    r = surface_metrics(a, b)
    assert r.undefined and r.hd95 == r.asd == pytest.approx(math.sqrt(16 + 25 + 36))


def test_boundary_matches_oracle(rng):
    for n in (6, 10):
        m = random_blob(rng, n)
        np.testing.assert_array_equal(boundary(m), boundary_oracle(m))


@pytest.mark.parametrize("seed", range(8))
def test_surface_matches_all_pairs_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(8, 17))
    a, b = random_blob(rng, n), random_blob(rng, n)
    hd95, asd, hd100 = surface_oracle(a, b)
    r = surface_metrics(a, b)
    assert abs(r.hd95 - hd95) <= 1e-6 and abs(r.asd - asd) <= 1e-6
    assert r.hd95 <= hd100 + 1e-12 and r.asd <= hd100 + 1e-12
    s = surface_metrics(b, a)
    assert (s.hd95, s.asd) == pytest.approx((r.hd95, r.asd), abs=1e-12)


# -- paired t-test ---------------------------------------------------------------

def test_t_test_reference_case():
    t, p = paired_t_test([1, 2, 3], [0, 0, 0])
    assert t == pytest.approx(2 * math.sqrt(3), rel=1e-12)
    assert p == pytest.approx(0.0742, abs=1e-3)
    assert p == pytest.approx(t_p_oracle(t, 2), abs=1e-9)


def test_t_test_conventions():
    assert paired_t_test([1, 2, 3], [1, 2, 3]) == (0.0, 1.0)
    t1, p1 = paired_t_test([3, 1, 4, 1], [2, 7, 1, 8])
    t2, p2 = paired_t_test([2, 7, 1, 8], [3, 1, 4, 1])
    assert t1 == -t2 and p1 == p2
    with pytest.raises(ValidationError):
        paired_t_test([1], [2])


@pytest.mark.parametrize("n", [3, 5, 10])
@pytest.mark.parametrize("seed", range(4))
def test_t_test_matches_integration_oracle(n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=n)
    b = a + rng.normal(0.4, 1.0, size=n)
    t, p = paired_t_test(a, b)
    d = a - b
    assert t == pytest.approx(d.mean() / (d.std(ddof=1) / math.sqrt(n)), rel=1e-12)
    assert abs(p - t_p_oracle(t, n - 1)) < 1e-3
    assert abs(p - t_p_oracle(t, n - 1)) < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.floats(0.5, 30), st.floats(0.5, 30), st.floats(0.0, 1.0))
def test_betainc_symmetry(a, b, x):
    assert betainc_reg(a, b, x) == pytest.approx(1 - betainc_reg(b, a, 1 - x), abs=1e-10)


def test_betainc_closed_forms():
    for x in (0.1, 0.5, 0.9):
        assert betainc_reg(1, 1, x) == pytest.approx(x)
        assert betainc_reg(2, 1, x) == pytest.approx(x * x)
        assert betainc_reg(0.5, 0.5, x) == pytest.approx(2 / math.pi * math.asin(math.sqrt(x)))


# -- split evaluation ------------------------------------------------------------

def _cases(n=3, size=16):
    rng = np.random.default_rng(5)
    out = []
    for i in range(n):
        lab = random_blob(rng, size).astype(np.uint8)
        out.append(VolumeSample(f"c{i}", lab.astype(np.float32) * 2 - 1, lab, True))
    return out


def perfect_model(_w, x):
    fg = (x.data[:, 0] > 0).astype(np.float32)
    return None, None, Tensor(np.stack([1 - fg, fg], axis=1))


def test_perfect_model_report(tmp_path):
    rep = evaluate_split(perfect_model, None, _cases(), 8, dump_dir=tmp_path)
    assert rep.mean("dice") == 1.0 and rep.mean("hd95") == 0.0 and rep.mean("asd") == 0.0
    dumped = read_volume(tmp_path / "c0_probs.cpv")
    np.testing.assert_array_equal(dumped.label, _cases()[0].label)


def test_report_deterministic_and_ordered():
    state = init_weights(UNetConfig(base_channels=4, depth=2), 4)
    net = SegNet(state.config)
    cases = _cases()
    a = evaluate_split(net, state.student, cases[::-1], 8)
    b = evaluate_split(net, state.student, cases, 8)
    assert a.records() == b.records()
    assert [c.id for c in a.cases] == ["c0", "c1", "c2"]
    assert a.mean("jaccard") <= a.mean("dice")
    for c in a.cases:
        assert 0 <= c.jaccard <= c.dice <= 1 and c.hd95 >= 0 and c.asd >= 0


def test_unlabeled_sample_rejected():
    v = _cases(1)[0]
    with pytest.raises(UsageError):
        evaluate_split(perfect_model, None, [v.unlabeled()], 8)


def test_report_formatting(tmp_path):
    rep = evaluate_split(perfect_model, None, _cases(), 8)
    assert rep.row()["dice"] == "100.00 (0.00)"
    assert "mean (std)" in rep.table("x")
    rep.write_jsonl(tmp_path / "m.jsonl")
    assert len((tmp_path / "m.jsonl").read_text().splitlines()) == 4


def test_compare_reports():
    from cpcl.evaluation import CaseMetrics
    a = MetricsReport([CaseMetrics(f"c{i}", 0.5 + 0.1 * i, 0.3, 2.0, 1.0) for i in range(3)])
    b = MetricsReport([CaseMetrics(f"c{i}", 0.4 + 0.1 * i + 0.01 * i * i, 0.3, 2.0, 1.0)
                       for i in range(3)])
    out = compare_reports(a, b)
    assert out["jaccard"]["t"] == 0.0 and out["jaccard"]["p"] == 1.0
    assert out["dice"]["t"] > 0
    with pytest.raises(ValidationError):
        compare_reports(a, MetricsReport(b.cases[:2]))
