import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bocf.imageio import AugmentationConfig
from bocf.model import BocfConfig, init_model
from bocf.synth import synthetic_dataset
from bocf.train import (
    NonFiniteLossError,
    OptimizerState,
    TrainConfig,
    adam_step,
    crossvalidate,
    fold_indices,
    kmeans,
    train,
)

from oracles import scalar_adam

TINY = BocfConfig(filters=4, codebook_size=8, hidden=8, input_size=16)
TINY_AUG = AugmentationConfig(crop_size=20, output_size=16)


@pytest.fixture(scope="module")
def tiny_data():
    return synthetic_dataset(6, 24, seed=11, n_patches=6)


class TestKMeans:
    def test_k_equals_n_returns_points(self):
        x = np.random.default_rng(0).random((7, 3))
        r = kmeans(x, 7, seed=1)
        assert sorted(map(tuple, r.centers)) == sorted(map(tuple, x))
        assert r.inertia[-1] == 0.0

    def test_two_clouds(self):
        rng = np.random.default_rng(2)
        a = rng.normal(0, 0.1, (50, 2))
        b = rng.normal(10, 0.1, (60, 2))
        r = kmeans(np.vstack([a, b]), 2, seed=3)
        got = r.centers[np.argsort(r.centers[:, 0])]
        np.testing.assert_allclose(got[0], a.mean(0), atol=1e-9)
        np.testing.assert_allclose(got[1], b.mean(0), atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_inertia_non_increasing_and_deterministic(self, seed, k):
        x = np.random.default_rng(seed).random((40, 3))
        r1, r2 = kmeans(x, k, seed), kmeans(x, k, seed)
        assert r1.centers.tobytes() == r2.centers.tobytes()
        assert all(b <= a + 1e-12 for a, b in zip(r1.inertia, r1.inertia[1:]))

    def test_duplicate_points(self):
        r = kmeans(np.ones((5, 2)), 3)
        np.testing.assert_array_equal(r.centers, np.ones((3, 2)))

    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="at least"):
            kmeans(np.zeros((3, 2)), 4)


class TestAdam:
    cfg = TrainConfig(learning_rate=1e-3)

    def test_zero_gradient_on_fresh_state(self):
        p = {"w": np.array([1.0, -2.0])}
        new, state = adam_step(p, {"w": np.zeros(2)}, OptimizerState(), self.cfg)
        np.testing.assert_array_equal(new["w"], p["w"])
        assert state.step == 1

    def test_first_step_magnitude_is_lr(self):
        p = {"w": np.zeros(4)}
        g = {"w": np.array([1e-3, -5.0, 2.0, 1e4])}
        new, _ = adam_step(p, g, OptimizerState(), self.cfg)
        np.testing.assert_allclose(np.abs(new["w"]), 1e-3, rtol=1e-4)
        np.testing.assert_array_equal(np.sign(new["w"]), -np.sign(g["w"]))

    def test_moments_decay_under_zero_gradient(self):
        p, state = {"w": np.zeros(1)}, OptimizerState()
        p, state = adam_step(p, {"w": np.ones(1)}, state, self.cfg)
        m0, v0 = state.m["w"].copy(), state.v["w"].copy()
        p, state = adam_step(p, {"w": np.zeros(1)}, state, self.cfg)
        np.testing.assert_allclose(state.m["w"], 0.9 * m0, rtol=1e-15)
        np.testing.assert_allclose(state.v["w"], 0.999 * v0, rtol=1e-15)

    def test_matches_scalar_reference(self):
        rng = np.random.default_rng(5)
        grads = rng.normal(size=1000)
        p, state = {"w": np.array(0.3)}, OptimizerState()
        for g in grads:
            p, state = adam_step(p, {"w": np.array(g)}, state, self.cfg)
        ref = scalar_adam(0.3, grads, 1e-3, 0.9, 0.999, 1e-8)
        assert abs(float(p["w"]) - ref) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, OptimizerState(), self.cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(beta1=1.0)


class TestTrain:
    def test_zero_epochs_is_identity(self, tiny_data):
        m = init_model(TINY, seed=0)
        r = train(m, tiny_data, TrainConfig(epochs=0), TINY_AUG)
        assert r.history == [] and r.model.equals(m)

    def test_reproducible_and_thread_independent(self, tiny_data):
        cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3, seed=7)
        m = init_model(TINY, seed=0)
        a = train(m, tiny_data, cfg, TINY_AUG)
        b = train(m, tiny_data, cfg, TINY_AUG)
        c = train(m, tiny_data, TrainConfig(**{**cfg.__dict__, "workers": 2}), TINY_AUG)
        assert a.history == b.history == c.history
        assert a.model.equals(b.model) and a.model.equals(c.model)
        assert len(a.history) == 2 and all(np.isfinite(a.history))
        assert not a.model.equals(m)  # the input model is left untouched and training moved

    def test_loss_decreases(self, tiny_data):
        cfg = TrainConfig(epochs=15, batch_size=3, learning_rate=3e-3, seed=1)
        r = train(init_model(TINY, seed=0), tiny_data, cfg, TINY_AUG)
        assert np.mean(r.history[-3:]) < np.mean(r.history[:3])

    def test_progress_callbacks(self, tiny_data):
        seen, saved = [], []
        train(init_model(TINY, seed=0), tiny_data, TrainConfig(epochs=2, batch_size=6), TINY_AUG,
              progress=lambda e, v: seen.append(e), on_epoch=lambda e, m: saved.append(e))
        assert seen == saved == [1, 2]

    def test_non_finite_loss_raises(self, tiny_data):
        m = init_model(TINY, seed=0)
        m.params["head.w2"].data = np.full_like(m.params["head.w2"].data, np.nan)
        with pytest.raises(NonFiniteLossError):
            train(m, tiny_data, TrainConfig(epochs=1, kmeans=False), TINY_AUG)

    def test_size_mismatch(self, tiny_data):
        with pytest.raises(ValueError, match="input size"):
            train(init_model(TINY), tiny_data, TrainConfig(epochs=1), AugmentationConfig(output_size=32))


class TestFolds:
    def test_partition(self):
        folds = fold_indices(9, 3, seed=0)
        assert [len(f) for f in folds] == [3, 3, 3]
        assert sorted(np.concatenate(folds).tolist()) == list(range(9))

    @settings(max_examples=50)
    @given(st.integers(2, 60), st.integers(2, 10), st.integers(0, 99))
    def test_partition_property(self, n, k, seed):
        if n < k:
            with pytest.raises(ValueError, match="insufficient"):
                fold_indices(n, k, seed)
            return
        folds = fold_indices(n, k, seed)
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1
        assert sorted(np.concatenate(folds).tolist()) == list(range(n))

    def test_crossvalidate_pools_every_image(self, tiny_data):
        cfg = TrainConfig(epochs=1, batch_size=4)
        r = crossvalidate(tiny_data, 3, TINY, cfg, TINY_AUG)
        assert len(r.folds) == 3 and r.pooled.n == len(tiny_data)
        assert sum(f.n for f in r.folds) == r.pooled.n
