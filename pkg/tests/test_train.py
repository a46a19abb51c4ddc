import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mddformer.errors import ConfigError, TrainingError
from mddformer.ingest import stratified_kfold
from mddformer.model import MDDformer, ModelConfig, init_params, load_checkpoint, save_checkpoint
from mddformer.train import (TINY_MODEL, AdamState, TrainConfig, adam_step, check_model_gradients, cosine_lr,
                             gradient_check, relative_error, tiny_gradient_check, train_model)


def small_config(**kw):
    base = dict(n_audio=8, n_visual=8, d_model=8, n_heads=2, d_ff=16, epochs=2, lr_max=1e-3, seed=4)
    base.update(kw)
    return TrainConfig(**base)


class TestCosineLR:
    def test_spot_values(self):
        cfg = TrainConfig(lr_max=1e-5, lr_min=1e-7, epochs=300)
        assert cosine_lr(0, cfg) == 1e-5
        assert math.isclose(cosine_lr(300, cfg), 1e-7, rel_tol=1e-12)
        assert math.isclose(cosine_lr(150, cfg), (1e-5 + 1e-7) / 2, rel_tol=1e-12)

    def test_default_ends_at_zero(self):
        assert abs(cosine_lr(300, TrainConfig())) < 1e-20

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            cosine_lr(301, TrainConfig())

    @given(epochs=st.integers(1, 500), lr_max=st.floats(1e-6, 1.0), frac=st.floats(0, 1))
    def test_monotone_non_increasing(self, epochs, lr_max, frac):
        cfg = TrainConfig(lr_max=lr_max, lr_min=lr_max * frac, epochs=epochs)
        lrs = [cosine_lr(e, cfg) for e in range(epochs + 1)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))


class TestAdam:
    def _run(self, steps, theta=1.0, lr=0.1):
        p = {"t": np.array([theta])}
        s = AdamState.zeros_like(p)
        for _ in range(steps):
            p, s = adam_step(p, {"t": 2 * p["t"]}, s, lr)
        return p["t"][0]

    def test_first_step_moves_by_lr(self):
        assert abs(self._run(1) - 0.9) < 1e-6

    def test_zero_gradient_no_change(self, rng):
        p = {"a": rng.standard_normal((3, 2))}
        new, _ = adam_step(p, {"a": np.zeros((3, 2))}, AdamState.zeros_like(p), 0.1)
        np.testing.assert_array_equal(new["a"], p["a"])

    def test_two_hundred_steps_on_square(self):
        # independent scalar simulation of the same recursion
        th, m, v = 1.0, 0.0, 0.0
        for t in range(1, 201):
            g = 2 * th
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            th -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        got = self._run(200)
        assert abs(got - th) < 1e-12
        assert abs(got) < 0.05

    def test_inputs_untouched(self, rng):
        p = {"a": rng.standard_normal(4)}
        before = p["a"].copy()
        adam_step(p, {"a": np.ones(4)}, AdamState.zeros_like(p), 0.1)
        np.testing.assert_array_equal(p["a"], before)

    def test_shape_mismatch(self):
        p = {"a": np.zeros(3)}
        with pytest.raises(TrainingError):
            adam_step(p, {"a": np.zeros(4)}, AdamState.zeros_like(p), 0.1)
        with pytest.raises(TrainingError):
            adam_step(p, {"b": np.zeros(3)}, AdamState.zeros_like(p), 0.1)


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [dict(lr_min=1.0, lr_max=0.1), dict(batch_size=0), dict(betas=(1.0, 0.9)),
                                    dict(epochs=-1), dict(dropout=1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_dict_roundtrip(self):
        cfg = small_config()
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown"):
            TrainConfig.from_dict({"learning_rate": 1})


class TestTrainModel:
    def test_bitwise_deterministic(self, small_synth):
        folds = stratified_kfold(small_synth, 5, 0)
        a = train_model(small_synth, folds, 0, small_config())
        b = train_model(small_synth, folds, 0, small_config())
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()
        assert a.history.to_csv() == b.history.to_csv()
        assert [p.probs for p in a.predictions] == [p.probs for p in b.predictions]

    def test_zero_epochs_returns_initial_params(self, small_synth):
        folds = stratified_kfold(small_synth, 5, 0)
        cfg = small_config(epochs=0)
        res = train_model(small_synth, folds, 1, cfg)
        init = init_params(res.model_config, np.random.default_rng(cfg.seed), np.float32)
        assert len(res.history) == 0
        for k in init:
            np.testing.assert_array_equal(res.params[k], init[k])
        assert len(res.predictions) == len(folds.test_indices(small_synth, 1))

    def test_one_record_per_epoch(self, small_synth):
        res = train_model(small_synth, stratified_kfold(small_synth, 5, 0), 0, small_config(epochs=3))
        assert [r.epoch for r in res.history.records] == [0, 1, 2]
        assert res.history.to_csv().splitlines()[0] == "epoch,train_loss,train_accuracy,lr"

    def test_bad_fold(self, small_synth):
        with pytest.raises(ConfigError):
            train_model(small_synth, stratified_kfold(small_synth, 5, 0), 5, small_config())

    def test_unaligned_lengths(self, small_synth):
        with pytest.raises(ConfigError):
            train_model(small_synth, stratified_kfold(small_synth, 5, 0), 0, small_config(n_visual=4))

    def test_nonfinite_loss_reported(self, small_synth):
        from mddformer.ingest import Dataset, LabeledSample, ModalitySequence
        bad = [LabeledSample(s.sample_id, ModalitySequence(np.full_like(s.audio.data, 1e30)), s.visual, s.label)
               for s in small_synth.samples]
        ds = Dataset(tuple(bad), small_synth.n_audio, small_synth.n_visual)
        with pytest.raises(TrainingError, match="epoch 0, batch 0"), np.errstate(all="ignore"):
            train_model(ds, stratified_kfold(ds, 5, 0), 0, small_config(standardize=False))

    def test_frozen_batch_loss_decreases(self, small_synth):
        cfg = ModelConfig(d_audio=5, d_visual=6, seq_len=8, d_model=8, n_heads=2, d_ff=16)
        model = MDDformer(cfg)
        params = init_params(cfg, np.random.default_rng(0))
        X_a = small_synth.audio_array[:8].astype(np.float32)
        X_v = small_synth.visual_array[:8].astype(np.float32)
        y = small_synth.labels[:8]
        state = AdamState.zeros_like(params)
        losses = []
        for _ in range(6):
            loss, grads, _ = model.loss_and_grad(params, X_a, X_v, y)
            losses.append(loss)
            params, state = adam_step(params, grads, state, 1e-3)
        non_decreasing = sum(b >= a for a, b in zip(losses, losses[1:]))
        assert non_decreasing <= 1, losses


class TestGradientCheck:
    def test_tiny_model(self):
        res = tiny_gradient_check(0)
        assert res.passed(1e-4), res
        assert res.n_checked == sum(p.size for p in init_params(TINY_MODEL, np.random.default_rng(0)).values())

    def test_zero_input_batch(self):
        assert tiny_gradient_check(1, zero_input=True).passed(1e-4)

    def test_zero_input_at_fresh_init_is_stationary(self):
        # zero biases + zero batch: analytic grads vanish, FD residue shrinks as step^2
        params = init_params(TINY_MODEL, np.random.default_rng(1), np.float64)
        model = MDDformer(TINY_MODEL)
        X_a, X_v, y = np.zeros((4, 5, 6)), np.zeros((4, 5, 7)), np.arange(4) % 2
        loss, grads, _ = model.loss_and_grad(params, X_a, X_v, y)
        assert abs(loss - math.log(2)) < 1e-12
        assert max(np.abs(g).max() for g in grads.values()) < 1e-12
        p = params["fusion.ffn.b2"]

        def fd(h):
            p[9] += h
            lp = model.loss_and_grad(params, X_a, X_v, y)[0]
            p[9] -= 2 * h
            lm = model.loss_and_grad(params, X_a, X_v, y)[0]
            p[9] += h
            return (lp - lm) / (2 * h)

        ratio = fd(1e-4) / fd(1e-5)
        assert 90 < ratio < 110

    def test_concat_mode(self):
        cfg = ModelConfig(d_audio=6, d_visual=7, seq_len=5, d_model=8, n_heads=2, d_ff=16, fusion_mode="concat")
        assert tiny_gradient_check(2, config=cfg).passed(1e-4)

    def test_sign_flip_is_caught(self):
        rng = np.random.default_rng(0)
        params = init_params(TINY_MODEL, rng, np.float64)
        model = MDDformer(TINY_MODEL)
        X_a = rng.standard_normal((4, 5, 6))
        X_v = rng.standard_normal((4, 5, 7))
        y = np.array([0, 1, 0, 1])

        def corrupted(p):
            loss, grads, _ = model.loss_and_grad(p, X_a, X_v, y)
            grads["fusion.W_Qa"] = -grads["fusion.W_Qa"]
            return loss, grads

        res = gradient_check(corrupted, params)
        assert res.max_rel_error > 0.1
        assert res.worst[0] == "fusion.W_Qa"

    def test_sampled_mode_covers_every_parameter(self):
        rng = np.random.default_rng(0)
        params = init_params(TINY_MODEL, rng, np.float64)
        X_a = rng.standard_normal((2, 5, 6))
        X_v = rng.standard_normal((2, 5, 7))
        res = check_model_gradients(MDDformer(TINY_MODEL), params, X_a, X_v, np.array([0, 1]),
                                    full_limit=100, n_sample=500)
        assert set(res.per_param) == set(params)
        assert res.n_checked >= 500
        assert res.passed(1e-4)

    def test_relative_error_floor(self):
        assert relative_error(0.0, 1e-11) < 1e-4
        assert relative_error(2e-7, 1e-7) == pytest.approx(0.1)


def test_checkpoint_roundtrip(tmp_path, rng):
    cfg = ModelConfig(d_audio=3, d_visual=4, seq_len=6, d_model=4, n_heads=2, d_ff=8, fusion_mode="concat")
    params = init_params(cfg, rng)
    buffers = {"audio_mean": np.arange(3.0)}
    save_checkpoint(tmp_path / "m.safetensors", params, cfg, buffers)
    p2, cfg2, b2 = load_checkpoint(tmp_path / "m.safetensors")
    assert cfg2 == cfg
    assert set(p2) == set(params)
    for k in params:
        assert p2[k].tobytes() == params[k].tobytes()
    np.testing.assert_array_equal(b2["audio_mean"], [0, 1, 2])
    save_checkpoint(tmp_path / "n.safetensors", params, cfg, buffers)
    assert (tmp_path / "m.safetensors").read_bytes() == (tmp_path / "n.safetensors").read_bytes()
