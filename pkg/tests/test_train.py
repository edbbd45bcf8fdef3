import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from strokeseg.model import ModelConfig, SegModel
from strokeseg.phantom import PhantomSpec, gen_phantom
from strokeseg.train import (AugmentParams, Checkpoint, Ensemble, SliceDataset, TrainConfig,
                             TrainingError, VolumeCase, apply_augment, augment, ensemble_predict,
                             sample_batch, select_best, train, tta_predict, validation_iou)
from strokeseg.volume import Projection, window_scale


def disk(n=64, r=15):
    yy, xx = np.mgrid[:n, :n]
    c = (n - 1) / 2
    return (((yy - c) ** 2 + (xx - c) ** 2) < r * r).astype(np.uint8)


@pytest.fixture(scope="module")
def phantom_case():
    hu, lab = gen_phantom(PhantomSpec("hemorrhagic", (32, 32, 32), (2, 2, 2), seed=4))
    return VolumeCase("case_000", window_scale(hu).values, lab.labels, "hemorrhagic")


class TestSampler:
    def test_stroke_frequency(self):
        rng = np.random.default_rng(0)
        n, stroke = 1000, np.arange(200)  # 20% stroke slices
        idx = np.concatenate([sample_batch(n, stroke, 10, rng) for _ in range(1000)])
        assert idx.size == 10_000
        assert abs(np.isin(idx, stroke).mean() - 0.60) <= 0.02

    def test_same_seed_same_indices(self):
        a = sample_batch(50, [1, 2, 3], 16, np.random.default_rng(9))
        b = sample_batch(50, [1, 2, 3], 16, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_empty_stroke_pool(self):
        idx = sample_batch(20, [], 64, np.random.default_rng(1))
        assert idx.min() >= 0 and idx.max() < 20

    def test_dataset_pools(self, phantom_case):
        ds = SliceDataset([phantom_case], Projection.CORONAL)
        assert len(ds) == 32
        stroke_rows = [i for i in range(32) if phantom_case.labels[:, i, :].any()]
        np.testing.assert_array_equal(ds.stroke, stroke_rows)


class TestAugment:
    def test_toggles_off_identity(self):
        rng = np.random.default_rng(0)
        img = rng.random((16, 16)).astype(np.float32)
        msk = (rng.random((16, 16)) < 0.3).astype(np.uint8)
        cfg = TrainConfig(aug_rot90=False, aug_flip=False, aug_scale=False, aug_rotate=False)
        out_i, out_m = augment(img, msk, rng, cfg)
        np.testing.assert_array_equal(out_i, img)
        np.testing.assert_array_equal(out_m, msk)

    def test_four_rotations_identity(self):
        rng = np.random.default_rng(1)
        img = rng.random((8, 8)).astype(np.float32)
        msk = rng.integers(0, 3, (8, 8)).astype(np.uint8)
        i, m = img, msk
        for _ in range(4):
            i, m = apply_augment(i, m, AugmentParams(k90=1))
        np.testing.assert_array_equal(i, img)
        np.testing.assert_array_equal(m, msk)

    def test_scale_grows_disk_area(self):
        d = disk()
        _, m = apply_augment(d.astype(np.float32), d, AugmentParams(scale=1.1))
        assert 1.15 <= m.sum() / d.sum() <= 1.27

    def test_rotation_keeps_centered_disk(self):
        d = disk()
        _, m = apply_augment(d.astype(np.float32), d, AugmentParams(angle_deg=37.0))
        assert abs(int(m.sum()) - int(d.sum())) <= 0.03 * d.sum()

    def test_non_square_rejected(self):
        with pytest.raises(ValueError, match="square"):
            apply_augment(np.zeros((8, 16)), np.zeros((8, 16)), AugmentParams())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_augment_keeps_labels_and_dims(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((16, 16)).astype(np.float32)
    msk = rng.integers(0, 3, (16, 16)).astype(np.uint8)
    out_i, out_m = augment(img, msk, rng)
    assert out_i.shape == out_m.shape == (16, 16)
    assert set(np.unique(out_m)) <= {0, 1, 2}


class TestTrain:
    def test_overfits_single_phantom(self, phantom_case):
        ds = SliceDataset([phantom_case])
        cfg = TrainConfig(steps=300, eval_every=100, seed=1)
        res = train(cfg, ds, [phantom_case], SegModel(ModelConfig.tiny(), init_seed=1))
        assert np.mean(res.losses[-20:]) < 0.5 * np.mean(res.losses[:20])
        assert [c.step for c in res.checkpoints] == [100, 200, 300]
        assert all(0 <= c.val_iou <= 1 for c in res.checkpoints)
        assert res.best.val_iou == max(c.val_iou for c in res.checkpoints)

    def test_deterministic(self, phantom_case):
        ds = SliceDataset([phantom_case])
        cfg = TrainConfig(steps=40, eval_every=20, seed=3)
        runs = [train(cfg, ds, [phantom_case], SegModel(ModelConfig.tiny(), init_seed=3)) for _ in range(2)]
        assert [c.val_iou for c in runs[0].checkpoints] == [c.val_iou for c in runs[1].checkpoints]
        assert runs[0].losses == runs[1].losses
        for k, v in runs[0].best.state.items():
            np.testing.assert_array_equal(v, runs[1].best.state[k])

    def test_non_finite_loss_reports_step(self, phantom_case):
        bad = VolumeCase("bad", np.full_like(phantom_case.image, np.nan), phantom_case.labels, "hemorrhagic")
        with pytest.raises(TrainingError, match="step 1") as info:
            train(TrainConfig(steps=5, eval_every=5), SliceDataset([bad]), [], SegModel(ModelConfig.tiny()))
        assert info.value.step == 1

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(steps=0)
        with pytest.raises(ValueError):
            TrainConfig(stroke_sample_prob=1.5)
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"steps": 5, "warmup": 1})


class Const:
    def __init__(self, c):
        self.c = c

    def __call__(self, x):
        x = np.asarray(x)
        return np.full((x.shape[0], 2) + x.shape[2:], self.c, np.float32)


class Echo:
    def __call__(self, x):
        x = np.asarray(x, dtype=np.float32)
        return np.concatenate([x, x], axis=1)


class TestInference:
    def test_tta_constant(self):
        out = tta_predict(Const(0.3), np.zeros((2, 1, 8, 8)))
        np.testing.assert_allclose(out, 0.3, rtol=1e-6)

    def test_tta_flip_equivariant_model(self):
        x = np.random.default_rng(0).random((2, 1, 8, 8)).astype(np.float32)
        np.testing.assert_allclose(tta_predict(Echo(), x)[:, :1], x, rtol=1e-6)

    def test_tta_convex(self):
        m = SegModel(ModelConfig.tiny(), init_seed=2)
        x = np.random.default_rng(1).random((2, 1, 32, 32)).astype(np.float32)
        preds = [m(x), m(x[..., ::-1].copy())[..., ::-1], m(x[..., ::-1, :].copy())[..., ::-1, :]]
        out = tta_predict(m, x)
        assert np.all(out >= np.min(preds, axis=0) - 1e-6) and np.all(out <= np.max(preds, axis=0) + 1e-6)

    def test_ensemble(self):
        x = np.zeros((1, 1, 4, 4))
        np.testing.assert_allclose(ensemble_predict([Const(0.2), Const(0.6)], x), 0.4, rtol=1e-6)
        np.testing.assert_array_equal(ensemble_predict([Const(0.2)], x), Const(0.2)(x))
        with pytest.raises(ValueError):
            Ensemble([])

    def test_select_best_ties_keep_order(self):
        cks = [Checkpoint(100, 0.5, 0), Checkpoint(200, 0.7, 0), Checkpoint(300, 0.7, 0)]
        assert [c.step for c in select_best(cks, 2)] == [200, 300]
        with pytest.raises(ValueError):
            select_best(cks, 4)

    def test_validation_iou_perfect_predictor(self, phantom_case):
        class Oracle:
            def __call__(self, x):
                # hand back the truth for the slices in order
                lab = phantom_case.labels[:, None]
                return np.concatenate([lab == 1, lab == 2], axis=1).astype(np.float32)

        assert validation_iou(Oracle(), [phantom_case]) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.data())
def test_select_best_matches_sort(scores, data):
    k = data.draw(st.integers(1, len(scores)))
    cks = [Checkpoint(i, s, 0.0) for i, s in enumerate(scores)]
    want = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]
    assert [c.step for c in select_best(cks, k)] == want
