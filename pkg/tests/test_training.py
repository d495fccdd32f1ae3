import math

import numpy as np
import pytest

from moretool import checkpoint
from moretool import tensor as T
from moretool.data import Dataset, FrameExample, VideoExample
from moretool.models import LCSpec, ModelSpec, PoolingSpec
from moretool.training import (
    OptState, TrainConfig, TrainingDivergence, adagrad_step, bce_loss, clip_gradients, global_norm, lr_at, train,
)


def toy_dataset(n=200, seed=0):
    """Two classes, each decided by the sign of one feature."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 4))
    examples = []
    for i, row in enumerate(x):
        labels = [c for c in (0, 1) if row[c] > 0]
        examples.append(VideoExample(f"t{i}", row, labels))
    return Dataset("video", 4, 2, examples)


def fast_config(**overrides):
    base = dict(base_lr=0.1, batch_size=32, epochs=6, dropout_keep=1.0, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


class TestLoss:
    def test_half_probabilities(self):
        loss = bce_loss(T.Tensor(np.full((3, 4), 0.5)), np.eye(3, 4))
        assert float(loss.value) == pytest.approx(4 * math.log(2), rel=1e-15)

    def test_exact_prediction_is_clamped(self):
        y = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss = float(bce_loss(T.Tensor(y.copy()), y).value)
        assert loss == pytest.approx(-2 * math.log(1 - 1e-7), rel=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(T.ShapeError):
            bce_loss(T.Tensor(np.full((2, 3), 0.5)), np.zeros((3, 2)))

    def test_gradient(self):
        rng = np.random.default_rng(0)
        y = (rng.random((5, 3)) < 0.4).astype(float)
        p = T.Tensor(rng.uniform(0.05, 0.95, (5, 3)), requires_grad=True)
        assert T.grad_check(lambda: bce_loss(p, y), [p]) < 1e-4


class TestSchedule:
    cfg = TrainConfig(decay_every_examples=8_000_000)

    @pytest.mark.parametrize("seen,lr", [(0, 0.0002), (8_000_000, 0.00016), (16_000_000, 0.000128)])
    def test_values(self, seen, lr):
        assert lr_at(seen, self.cfg) == pytest.approx(lr, rel=1e-12)

    def test_continuous_and_nonincreasing(self):
        values = [lr_at(s, self.cfg) for s in range(0, 20_000_000, 500_000)]
        assert all(b < a for a, b in zip(values, values[1:]))
        assert 0.00016 < lr_at(4_000_000, self.cfg) < 0.0002


class TestClip:
    def test_below_threshold_unchanged(self):
        g = [np.array([0.4, 0.0])]
        assert clip_gradients(g, 0.8)[0] is g[0]

    def test_scaled_to_threshold(self):
        g = [np.array([1.6 * 0.6]), np.array([[1.6 * 0.8]])]
        out = clip_gradients(g, 0.8)
        np.testing.assert_allclose(out[0], [0.48], rtol=1e-15)
        assert global_norm(out) == pytest.approx(0.8, rel=1e-15)

    def test_zero(self):
        out = clip_gradients([np.zeros(3)], 0.8)
        np.testing.assert_array_equal(out[0], np.zeros(3))

    def test_never_increases_norm(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            g = [rng.normal(scale=rng.uniform(0.01, 3), size=s) for s in [(3,), (2, 2)]]
            assert global_norm(clip_gradients(g, 0.8)) <= global_norm(g) + 1e-15

    def test_validated(self):
        with pytest.raises(ValueError):
            clip_gradients([np.ones(1)], 0.0)


class TestAdagrad:
    def test_first_step(self):
        params = {"w": T.Tensor(np.array([0.0]), requires_grad=True)}
        adagrad_step(params, {"w": np.array([1.0])}, OptState(), 0.1)
        assert params["w"].value[0] == pytest.approx(-0.1 / (1 + 1e-7), rel=1e-15)

    def test_zero_gradient(self):
        params = {"w": T.Tensor(np.array([2.0]), requires_grad=True)}
        state = OptState()
        adagrad_step(params, {"w": np.array([1.0])}, state, 0.1)
        before, acc = params["w"].value.copy(), state.accumulators["w"].copy()
        adagrad_step(params, {"w": np.array([0.0])}, state, 0.1)
        np.testing.assert_array_equal(params["w"].value, before)
        np.testing.assert_array_equal(state.accumulators["w"], acc)

    def test_second_step(self):
        params = {"w": T.Tensor(np.array([0.0]), requires_grad=True)}
        state = OptState()
        adagrad_step(params, {"w": np.array([1.0])}, state, 0.1)
        first = params["w"].value[0]
        adagrad_step(params, {"w": np.array([1.0])}, state, 0.1)
        assert params["w"].value[0] - first == pytest.approx(-0.1 / (math.sqrt(2) + 1e-7), rel=1e-15)
        assert state.step == 2


class TestConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.base_lr, cfg.decay_factor, cfg.clip_norm, cfg.dropout_keep) == (0.0002, 0.8, 0.8, 0.8)

    @pytest.mark.parametrize("bad", [{"base_lr": 0}, {"decay_factor": 1.5}, {"clip_norm": -1}, {"batch_size": 1}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"lr": 0.1})


class TestTrain:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_toy_problem(self, seed):
        ds = toy_dataset(seed=seed)
        val = toy_dataset(100, seed=seed + 10)
        res = train(ModelSpec("MoE", 2, 4, num_experts=2), ds, fast_config(seed=seed, epochs=10), val)
        losses = [row["loss"] for row in res.log]
        assert all(b < a for a, b in zip(losses[:5], losses[1:5]))
        assert res.log[-1]["gap"] > 0.95

    def test_deterministic_checkpoints(self, tmp_path):
        spec = ModelSpec("MoRE", 2, 4, num_experts=2, expert_hidden=3)
        cfg = fast_config(epochs=2, dropout_keep=0.8)
        train(spec, toy_dataset(), cfg, toy_dataset(40, 5), tmp_path / "a")
        train(spec, toy_dataset(), cfg, toy_dataset(40, 5), tmp_path / "b")
        for name in ("epoch_001.ckpt", "epoch_002.ckpt", "model.ckpt", "metrics.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_outputs(self, tmp_path):
        spec = ModelSpec("MoE", 2, 4, num_experts=2)
        train(spec, toy_dataset(), fast_config(epochs=2), toy_dataset(40, 5), tmp_path)
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,loss,gap,map,perr,lr" and len(lines) == 3
        loaded, _, meta = checkpoint.load(tmp_path / "model.ckpt")
        assert loaded == spec and meta["epoch"] == 2

    def test_late_fire_is_transparent(self):
        spec = ModelSpec("MoRE", 2, 4, num_experts=2, expert_hidden=3, lc=LCSpec(latent_dim=4, fire_after_epochs=2))
        res = train(spec, toy_dataset(), fast_config(epochs=4), toy_dataset(60, 5))
        assert res.attach_check["identical"] and res.attach_check["epoch"] == 3
        assert res.attach_check["gap_before"] == res.attach_check["gap_after"] == res.log[1]["gap"]
        assert any(k.startswith("lc/") for k in res.params)

    def test_fire_at_zero(self):
        spec = ModelSpec("MoE", 2, 4, num_experts=2, lc=LCSpec(latent_dim=3, fire_after_epochs=0))
        res = train(spec, toy_dataset(), fast_config(epochs=2))
        assert res.attach_check["epoch"] == 1 and len(res.log) == 2

    def test_config_overrides_fire_epoch(self):
        spec = ModelSpec("MoE", 2, 4, num_experts=2, lc=LCSpec(latent_dim=3, fire_after_epochs=5))
        res = train(spec, toy_dataset(), fast_config(epochs=2, lc_fire_after_epochs=1))
        assert res.attach_check["epoch"] == 2

    def test_frozen_backbone(self):
        spec = ModelSpec("MoE", 2, 4, num_experts=2, lc=LCSpec(latent_dim=3, fire_after_epochs=1))
        ref = train(spec, toy_dataset(), fast_config(epochs=1, dropout_keep=1.0))
        res = train(spec, toy_dataset(), fast_config(epochs=3, freeze_backbone_on_fire=True))
        for name, p in ref.params.items():
            np.testing.assert_array_equal(res.params[name].value, p.value)

    def test_divergence_names_step(self):
        ds = toy_dataset()
        ds.examples[0].features[:] = np.nan
        with pytest.raises(TrainingDivergence, match="step"):
            train(ModelSpec("MoE", 2, 4, num_experts=2), ds, fast_config(epochs=1, batch_size=200))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="input_dim"):
            train(ModelSpec("MoE", 2, 5, num_experts=2), toy_dataset(), fast_config())

    def test_max_steps(self):
        res = train(ModelSpec("MoE", 2, 4, num_experts=2), toy_dataset(), fast_config(max_steps=3))
        assert res.opt_state.step == 3 and len(res.log) == 1

    def test_frame_model(self):
        rng = np.random.default_rng(0)
        examples = []
        for i in range(40):
            frames = rng.normal(size=(int(rng.integers(3, 7)), 3))
            examples.append(FrameExample(f"f{i}", frames, [0] if frames[:, 0].mean() > 0 else []))
        ds = Dataset("frame", 3, 2, examples)
        spec = ModelSpec("MoE", 2, 3, num_experts=2, pooling=PoolingSpec("attentive_dbof", code_dim=4))
        res = train(spec, ds, fast_config(epochs=2, batch_size=16), ds)
        assert len(res.log) == 2 and math.isfinite(res.log[-1]["loss"])

    def test_video_model_on_frames_pools(self):
        rng = np.random.default_rng(0)
        ds = Dataset("frame", 3, 2, [FrameExample(f"f{i}", rng.normal(size=(6, 3)), [i % 2]) for i in range(20)])
        spec = ModelSpec("MoE", 2, 3, num_experts=2)
        res = train(spec, ds, fast_config(epochs=1, augment_segments=3, batch_size=16))
        assert res.opt_state.examples_seen == 80
