import json
import math
import os

import numpy as np
import pytest

from sxnet.model import ConfigError, ModelConfig
from sxnet.tasks import TASKS
from sxnet.tensor import Parameter
from sxnet.trainer import (
    AdamState,
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    clip_gradients,
    evaluate,
    init_state,
    instantiate_shared,
    load_checkpoint,
    prediction_accuracy,
    save_checkpoint,
    train,
    train_step,
)

TINY_MODEL = ModelConfig(maps=4, blocks=1, residual=False)


def tiny_config(**kw):
    base = dict(task="rev", model=TINY_MODEL, train_len=8, min_len=4, steps=5,
                batch=4, eval_every=0, log_every=1, eval_samples=8)
    base.update(kw)
    return TrainConfig(**base)


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = Parameter("p", np.array([1.0, -2.0]))
        st = AdamState([p])
        adam_step([p], st)
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_constant_gradient_update_approaches_lr(self):
        p = Parameter("p", np.array([0.0]))
        st = AdamState([p], lr=1e-3)
        for _ in range(200):
            p.grad[...] = 0.37
            adam_step([p], st)
        p.grad[...] = 0.37
        before = float(p.data[0])
        adam_step([p], st)
        assert abs((before - float(p.data[0])) - 1e-3) < 1e-5

    def test_three_step_scalar_recurrence_oracle(self):
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        p = Parameter("p", np.array([1.0]))
        st = AdamState([p], lr=lr, beta1=b1, beta2=b2, eps=eps)
        grads = [0.5, -0.3, 0.1]
        # plain-python recurrence
        theta, m, v = 1.0, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1 ** t)
            vh = v / (1 - b2 ** t)
            theta -= lr * mh / (math.sqrt(vh) + eps)
        for g in grads:
            p.grad[...] = g
            adam_step([p], st)
        assert abs(float(p.data[0]) - theta) < 1e-12

    def test_nonfinite_gradient_names_parameter(self):
        p = Parameter("layer.weird", np.array([1.0]))
        p.grad[...] = np.nan
        with pytest.raises(TrainingDiverged) as e:
            adam_step([p], AdamState([p]))
        assert "layer.weird" in str(e.value)

    def test_gradients_zeroed_after_step(self):
        p = Parameter("p", np.array([1.0]))
        p.grad[...] = 2.0
        adam_step([p], AdamState([p]))
        assert np.array_equal(p.grad, [0.0])

    def test_clip_scales_to_max_norm(self):
        a = Parameter("a", np.array([3.0]))
        b = Parameter("b", np.array([4.0]))
        a.grad[...] = 3.0
        b.grad[...] = 4.0
        norm = clip_gradients([a, b], 2.5)
        assert abs(norm - 5.0) < 1e-12
        assert abs(math.hypot(float(a.grad[0]), float(b.grad[0])) - 2.5) < 1e-9

    def test_clip_disabled_with_zero(self):
        a = Parameter("a", np.array([3.0]))
        a.grad[...] = 30.0
        clip_gradients([a], 0.0)
        assert float(a.grad[0]) == 30.0


class TestSharedInstances:
    def test_training_any_length_mutates_shared_store(self):
        state = init_state(tiny_config(train_len=16))
        plans = instantiate_shared(state.model, [8, 16])
        assert set(plans) == {8, 16}
        before = {p.name: p.data.copy() for p in state.parameters()}
        from sxnet.tasks import make_batch
        for pad in (8, 16):
            inputs, targets = make_batch(TASKS["rev"], pad // 2, pad, 4, state.rng)
            train_step(state, inputs, targets)
        changed = sum(not np.array_equal(before[p.name], p.data) for p in state.parameters())
        assert changed == len(before)

    def test_stage_count_per_instance(self):
        state = init_state(tiny_config(train_len=16))
        plans = instantiate_shared(state.model, [4, 8, 16, 32])
        for L, plan in plans.items():
            k = L.bit_length() - 1
            assert plan.switch_count == 2 * k - 1

    def test_parameter_count_constant_across_instances(self):
        state = init_state(tiny_config())
        n0 = sum(p.data.size for p in state.parameters())
        instantiate_shared(state.model, [4, 8, 16, 32, 64])
        assert sum(p.data.size for p in state.parameters()) == n0

    def test_sharing_none_multi_length_fatal(self):
        state = init_state(tiny_config(model=ModelConfig(maps=4, sharing="none", residual=False)))
        with pytest.raises(ConfigError):
            instantiate_shared(state.model, [8, 16])


class TestTrainLoop:
    def test_zero_steps_checkpoint_equals_init(self, tmp_path):
        cfg = tiny_config(steps=0)
        state, metrics = train(cfg, out_dir=str(tmp_path))
        assert metrics == []
        loaded = load_checkpoint(str(tmp_path / "checkpoint.sxnc"))
        fresh = init_state(cfg)
        for a, b in zip(loaded.parameters(), fresh.parameters()):
            assert a.name == b.name
            assert np.array_equal(a.data, b.data)

    def test_metrics_records_have_contract_fields(self, tmp_path):
        cfg = tiny_config(steps=4, eval_every=2, log_every=1)
        _, metrics = train(cfg, out_dir=str(tmp_path))
        assert len(metrics) == 4
        for rec in metrics:
            assert {"step", "task", "train_length", "loss", "accuracy", "eval", "wall_ms"} <= set(rec)
        assert metrics[1]["eval"] and not metrics[0]["eval"]
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(l)["step"] for l in lines] == [1, 2, 3, 4]

    def test_loss_finite_and_decreasing_on_tiny_run(self):
        cfg = tiny_config(task="copy", steps=60, batch=8,
                          model=ModelConfig(maps=8, blocks=1, residual=False))
        _, metrics = train(cfg)
        losses = [m["loss"] for m in metrics]
        assert all(math.isfinite(l) for l in losses)
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_divergence_aborts_with_checkpoint_retained(self, tmp_path):
        cfg = tiny_config(steps=3, checkpoint_every=1)
        state = init_state(cfg)
        from sxnet.tasks import make_batch
        inputs, targets = make_batch(TASKS["rev"], 4, 8, 4, state.rng)
        train_step(state, inputs, targets)
        save_checkpoint(str(tmp_path / "checkpoint.sxnc"), state)
        state.parameters()[0].data[...] = np.nan
        with pytest.raises(TrainingDiverged):
            train_step(state, inputs, targets)
        assert load_checkpoint(str(tmp_path / "checkpoint.sxnc")).step == 1

    def test_fixed_size_mode_single_length(self):
        cfg = tiny_config(steps=3, fixed_size=True, log_every=1)
        _, metrics = train(cfg)
        assert {m["train_length"] for m in metrics} == {8}


class TestEvaluate:
    def test_untrained_accuracy_near_chance(self):
        state = init_state(tiny_config(task="dup", train_len=16))
        res = evaluate(state, 16, n_samples=64, seed=3)
        # compute the dup target class distribution at this length class
        from sxnet.tasks import make_eval_batch
        rng = np.random.default_rng(0)
        _, targets = make_eval_batch(TASKS["dup"], 16, 256, rng)
        chance = max(np.bincount(targets.reshape(-1)) / targets.size)
        assert chance - 0.25 <= res["accuracy"] <= chance + 0.25

    def test_perfect_predictor_scores_one(self):
        targets = np.random.default_rng(1).integers(0, 5, size=(8, 16))
        per, whole = prediction_accuracy(targets.copy(), targets, "symbols")
        assert per == 1.0 and whole == 1.0
        pos = np.array([3, 7, 1])
        per, whole = prediction_accuracy(pos.copy(), pos, "position")
        assert per == 1.0

    def test_accuracy_monotone_in_correct_samples(self):
        targets = np.zeros((4, 8), dtype=np.int64)
        pred = targets.copy()
        pred[0] += 1  # one sample fully wrong
        accs = []
        for n_correct in (1, 2, 3):
            sub_pred = np.concatenate([pred[:1], targets[:n_correct]])
            sub_t = np.concatenate([targets[:1], targets[:n_correct]])
            accs.append(prediction_accuracy(sub_pred, sub_t, "symbols")[0])
        assert accs == sorted(accs)

    def test_single_sample_accuracy_on_grid(self):
        state = init_state(tiny_config(task="rev", train_len=8))
        res = evaluate(state, 8, n_samples=1, seed=5)
        assert abs(res["accuracy"] * 8 - round(res["accuracy"] * 8)) < 1e-9

    def test_deterministic_given_seed(self):
        state = init_state(tiny_config(task="sort", train_len=8))
        a = evaluate(state, 8, n_samples=32, seed=9)
        b = evaluate(state, 8, n_samples=32, seed=9)
        assert a == b


class TestCheckpoint:
    def test_roundtrip_byte_identity(self, tmp_path):
        cfg = tiny_config(steps=3)
        state, _ = train(cfg, out_dir=str(tmp_path / "a"))
        p1 = tmp_path / "a" / "checkpoint.sxnc"
        state2 = load_checkpoint(str(p1))
        save_checkpoint(str(tmp_path / "again.sxnc"), state2)
        assert p1.read_bytes() == (tmp_path / "again.sxnc").read_bytes()

    def test_corrupt_magic_fails_cleanly(self, tmp_path):
        cfg = tiny_config(steps=1)
        train(cfg, out_dir=str(tmp_path))
        path = tmp_path / "checkpoint.sxnc"
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_corrupt_version_fails_cleanly(self, tmp_path):
        train(tiny_config(steps=1), out_dir=str(tmp_path))
        path = tmp_path / "checkpoint.sxnc"
        blob = bytearray(path.read_bytes())
        blob[4] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError) as e:
            load_checkpoint(str(path))
        assert "version" in str(e.value)

    def test_truncated_file_fails_cleanly(self, tmp_path):
        train(tiny_config(steps=1), out_dir=str(tmp_path))
        path = tmp_path / "checkpoint.sxnc"
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 20])
        with pytest.raises(CheckpointError) as e:
            load_checkpoint(str(path))
        assert "truncated" in str(e.value)

    def test_cross_config_load_names_tensor(self, tmp_path):
        train(tiny_config(steps=1), out_dir=str(tmp_path))
        with pytest.raises(CheckpointError) as e:
            load_checkpoint(str(tmp_path / "checkpoint.sxnc"),
                            expect_model=ModelConfig(maps=8, blocks=1, residual=False))
        assert ".w1r" in str(e.value) or "tensor" in str(e.value)

    def test_shape_identical_config_mismatch_still_rejected(self, tmp_path):
        train(tiny_config(steps=1), out_dir=str(tmp_path))
        with pytest.raises(CheckpointError):
            load_checkpoint(str(tmp_path / "checkpoint.sxnc"),
                            expect_model=ModelConfig(maps=4, blocks=1, residual=False,
                                                     benes=False))


class TestResumeDeterminism:
    def test_resume_matches_uninterrupted_bitwise(self, tmp_path):
        cfg = tiny_config(task="sort", steps=8, eval_every=4, log_every=1, seed=7)
        _, full_metrics = train(cfg, out_dir=str(tmp_path / "full"))

        # interrupt the same run at its first eval (step 4), then resume
        train(cfg, out_dir=str(tmp_path / "half"), stop_when=lambda ev: True)
        assert load_checkpoint(str(tmp_path / "half" / "checkpoint.sxnc")).step == 4
        _, resumed_metrics = train(cfg, resume=str(tmp_path / "half" / "checkpoint.sxnc"),
                                   out_dir=str(tmp_path / "resumed"))

        def strip(recs):
            return [{k: v for k, v in r.items() if k != "wall_ms"} for r in recs]

        tail = [r for r in strip(full_metrics) if r["step"] > 4]
        assert strip(resumed_metrics) == tail

        a = load_checkpoint(str(tmp_path / "full" / "checkpoint.sxnc"))
        b = load_checkpoint(str(tmp_path / "resumed" / "checkpoint.sxnc"))
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert pa.name == pb.name and np.array_equal(pa.data, pb.data)
