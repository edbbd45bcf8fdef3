import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strokeseg.fusion import (DEFAULT_K_GRID, ClassifierParams, FusionParams, ball, classify,
                              decide, floor_mean, fuse, fuse_projections, morph_close,
                              predict_projections, tune_classifier, tune_fusion, v_pred)
from strokeseg.metrics import dsc
from strokeseg.volume import Projection

from oracles import brute_close

P = FusionParams()


class TestFuse:
    def test_single_projection_fires(self):
        assert fuse_projections(np.array(0.50), np.array(0.10), np.array(0.10), P) == 1

    def test_none_exceeds(self):
        assert fuse_projections(np.array(0.40), np.array(0.50), np.array(0.50), P) == 0

    def test_strict_threshold(self):
        assert fuse_projections(np.array(0.47), np.array(0.56), np.array(0.56), P) == 0

    def test_all_zero(self):
        z = np.zeros((4, 4, 4))
        assert not fuse_projections(z, z, z).any()

    def test_scalar_oracle(self):
        rng = np.random.default_rng(0)
        pa, pc, ps = rng.random((3, 100_000))
        got = fuse_projections(pa, pc, ps, P)
        want = [int(a > 0.47 or c > 0.56 or s > 0.56) for a, c, s in zip(pa, pc, ps)]
        np.testing.assert_array_equal(got, want)

    def test_misaligned(self):
        with pytest.raises(ValueError, match="not aligned"):
            fuse_projections(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), np.zeros((2, 2, 2)))

    def test_param_validation(self):
        with pytest.raises(ValueError):
            FusionParams(k_axial=1.2)
        with pytest.raises(ValueError):
            FusionParams(closing_radius=-1)


class TestVPred:
    def test_unit_ratios(self):
        assert v_pred(0.47, 0.56, 0.56) == 3.0
        pa = np.full((3, 3, 3), 0.47)
        assert np.all(v_pred(pa, np.full_like(pa, 0.56), np.full_like(pa, 0.56)) == 3.0)

    def test_single_term(self):
        assert v_pred(0.94, 0.0, 0.0) == pytest.approx(2.0, abs=1e-15)

    def test_linear(self):
        rng = np.random.default_rng(1)
        pa, pc, ps = rng.random((3, 50))
        np.testing.assert_array_equal(v_pred(2 * pa, 2 * pc, 2 * ps), 2 * v_pred(pa, pc, ps))
        np.testing.assert_allclose(v_pred(0.3 * pa, 0.3 * pc, 0.3 * ps), 0.3 * v_pred(pa, pc, ps), rtol=1e-14)


class TestClosing:
    def test_empty(self):
        assert not morph_close(np.zeros((5, 5, 5))).any()

    def test_gap_between_slabs_filled(self):
        b = np.zeros((9, 15, 15), np.uint8)
        b[3, 2:13, 2:13] = b[5, 2:13, 2:13] = 1
        c = morph_close(b, 3)
        assert c[4, 7, 7] == 1
        np.testing.assert_array_equal(c, brute_close(b, 3))

    def test_isolated_pair_matches_oracle(self):
        # a radius-3 ball centred at (7, 4, 4) holds the gap voxel but misses both
        # endpoints, so the true closing leaves this gap open
        b = np.zeros((9, 9, 9), np.uint8)
        b[4, 4, 3] = b[4, 4, 5] = 1
        c = morph_close(b, 3)
        np.testing.assert_array_equal(c, brute_close(b, 3))
        assert c[4, 4, 4] == 0

    def test_ball(self):
        assert ball(3).sum() == 123 and ball(0).sum() == 1

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            b = rng.random((12, 12, 12)) < 0.08
            np.testing.assert_array_equal(morph_close(b, 3), brute_close(b, 3))

    def test_radius_zero_identity(self):
        b = np.random.default_rng(3).random((6, 6, 6)) < 0.3
        np.testing.assert_array_equal(morph_close(b, 0), b)


class TestClassify:
    C = ClassifierParams()

    def test_ischemic(self):
        assert decide(1.20, None, self.C).predicted_class == "ischemic"
        assert decide(1.20, 1.40, self.C).predicted_class == "ischemic"

    def test_hemorrhagic(self):
        assert decide(1.00, 1.60, self.C).predicted_class == "hemorrhagic"

    def test_healthy_when_nothing_exceeds_floor(self):
        r = classify(np.full(10, 0.5), np.full(10, 0.9), self.C)
        assert r.predicted_class == "healthy" and r.m_isch is None and r.m_hem is None

    def test_both_ratio_rule(self):
        # 1.40/1.16 = 1.207 > 1.60/1.52 = 1.053
        assert decide(1.40, 1.60, self.C).predicted_class == "ischemic"
        assert decide(1.20, 2.00, self.C).predicted_class == "hemorrhagic"

    def test_exact_tie_goes_hemorrhagic(self):
        c = ClassifierParams(0.9, 1.0, 2.0)
        assert decide(1.5, 3.0, c).predicted_class == "hemorrhagic"

    def test_floor_mean_strict(self):
        assert floor_mean([0.9, 1.0, 2.0], 0.9) == 1.5
        assert floor_mean([0.1], 0.9) is None

    def test_order_invariant(self):
        rng = np.random.default_rng(4)
        v = rng.random(1000) * 2
        a = classify(v, v[::-1] * 1.1, self.C)
        perm = rng.permutation(v.size)
        b = classify(v[perm], (v[::-1] * 1.1)[rng.permutation(v.size)], self.C)
        assert a == b


class StubModel:
    def __init__(self, fn):
        self.fn = fn

    def __call__(self, slices):
        return self.fn(np.asarray(slices))


class TestPredictProjections:
    def test_constant_stubs(self):
        vol = np.zeros((4, 5, 6), np.float32)
        stub = StubModel(lambda x: np.full((x.shape[0], 2) + x.shape[2:], 0.3, np.float32))
        maps = predict_projections({p: [stub] for p in Projection}, vol)
        for p in Projection:
            assert maps[p].shape == (2, 4, 5, 6)
            np.testing.assert_array_equal(maps[p], np.float32(0.3))

    def test_orientation_restored(self):
        vol = np.random.default_rng(5).random((4, 5, 6)).astype(np.float32)
        echo = StubModel(lambda x: np.concatenate([x, 1 - x], axis=1))
        maps = predict_projections({p.value: [echo, echo] for p in Projection}, vol)
        for p in Projection:
            np.testing.assert_allclose(maps[p][0], vol, rtol=1e-6)


def _planted_val_set():
    gt = np.zeros((6, 6, 6), np.uint8)
    gt[2:4, 2:4, 2:4] = 1
    axial = np.where(gt == 1, 0.6, 0.0)
    axial[0, 0, :3] = 0.5  # false positives unless k_axial >= 0.5
    zero = np.zeros_like(axial)
    maps = {Projection.AXIAL: np.stack([axial, zero]), Projection.CORONAL: np.stack([zero, zero]),
            Projection.SAGITTAL: np.stack([zero, zero])}
    return [(maps, gt, "ischemic")]


class TestTuning:
    def test_planted_fusion_optimum(self):
        fp = tune_fusion(_planted_val_set())
        assert (fp.k_axial, fp.k_coronal, fp.k_sagittal) == (0.5, 0.35, 0.35)

    def test_tuned_not_worse_than_defaults(self):
        vs = _planted_val_set()
        maps, gt, _ = vs[0]
        fp = tune_fusion(vs)
        assert fp.k_axial in DEFAULT_K_GRID
        tuned = dsc(fuse(maps, fp, closing=False).binary[0], gt == 1)
        default = dsc(fuse(maps, FusionParams(), closing=False).binary[0], gt == 1)
        assert tuned >= default

    def test_planted_classifier(self):
        items = [(np.full(5, 1.3), np.zeros(5), "ischemic"),
                 (np.zeros(5), np.full(5, 1.9), "hemorrhagic"),
                 (np.full(5, 1.1), np.full(5, 1.5), "healthy")]
        cp = tune_classifier(items, floors=(0.9,), isch_grid=(1.0, 1.2, 1.4), hem_grid=(1.4, 1.6, 2.0))
        # smallest thresholds giving 3/3: isch > 1.1 and < 1.3, hem > 1.5 and < 1.9
        assert (cp.voxel_floor, cp.ischemic_mean_thresh, cp.hemorrhagic_mean_thresh) == (0.9, 1.2, 1.6)


vol_strategy = st.integers(0, 2**31 - 1).map(
    lambda s: np.random.default_rng(s).random((10, 10, 10)) < np.random.default_rng(s + 1).uniform(0.02, 0.3))


@settings(max_examples=25, deadline=None)
@given(vol_strategy, st.integers(1, 3))
def test_closing_laws(b, r):
    c = morph_close(b, r).astype(bool)
    assert np.all(c[b])                                   # extensive
    np.testing.assert_array_equal(morph_close(c, r), c)   # idempotent
    bigger = b | (np.random.default_rng(int(b.sum())).random(b.shape) < 0.05)
    assert np.all(morph_close(bigger, r).astype(bool)[c])  # increasing


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=3, max_size=3), st.integers(0, 2), st.floats(0, 1))
def test_fusion_monotone(p, i, bump):
    before = fuse_projections(*[np.array(x) for x in p])
    q = list(p)
    q[i] = min(1.0, q[i] + bump)
    assert fuse_projections(*[np.array(x) for x in q]) >= before
