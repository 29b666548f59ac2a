import json
import math

import numpy as np
import pytest

from attentive_gnn.attention import AttentionConfig, ModelParams
from attentive_gnn.autodiff import Tensor, backward, mul, total_sum
from attentive_gnn.episodes import generate_synthetic, split_classes
from attentive_gnn.training import (
    CheckpointError,
    OptimizerState,
    TrainConfig,
    adam_step,
    evaluate,
    initial_state,
    load_checkpoint,
    query_cross_entropy,
    save_checkpoint,
    train,
)


def scalar_params(w1=1.0):
    z = lambda v: Tensor([[v]], trainable=True)  # noqa: E731
    return ModelParams(z(w1), z(0.0), [], z(0.0), z(0.0))


def reference_adam(w, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook scalar Adam, one parameter."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


@pytest.fixture(scope="module")
def tiny():
    ds = generate_synthetic(10, 12, 4, 4.0, 1.0, seed=1)
    train_ds, test_ds = split_classes(ds, 4)
    cfg = TrainConfig(learning_rate=1e-2, batch_tasks=2, total_episodes=6, lr_halving_interval=4,
                      eval_interval=3, eval_episodes=5, seed=3, n_way=3, k_shot=1, q_query=2)
    acfg = AttentionConfig(layers=2, hidden_m=3)
    return train_ds, test_ds, cfg, acfg


class TestCrossEntropy:
    def test_uniform_logits_ln5(self):
        loss = query_cross_entropy(Tensor(np.zeros((1, 5))), [2]).item()
        assert abs(loss - math.log(5)) < 1e-9
        assert abs(loss - 1.6094) < 1e-4

    def test_confident_correct(self):
        logits = np.zeros((1, 5))
        logits[0, 1] = 40.0
        assert query_cross_entropy(Tensor(logits), [1]).item() <= 1e-6

    def test_sums_over_queries(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(4, 3))
        truth = [0, 2, 1, 1]
        expect = sum(-z[i, c] + math.log(sum(math.exp(v) for v in z[i])) for i, c in enumerate(truth))
        assert query_cross_entropy(Tensor(z), truth).item() == pytest.approx(expect, abs=1e-12)

    def test_needs_queries(self):
        with pytest.raises(ValueError):
            query_cross_entropy(Tensor(np.zeros((0, 3))), [])


class TestAdam:
    def test_zero_gradient_no_change(self):
        p = scalar_params(0.7)
        adam_step(p, OptimizerState(), 0.1)
        assert p.fusion_w1.item() == 0.7

    def test_first_step_magnitude(self):
        for g in (1e-3, 0.5, 30.0):
            p = scalar_params(1.0)
            p.fusion_w1.grad[:] = g
            adam_step(p, OptimizerState(), 0.01)
            step = 1.0 - p.fusion_w1.item()
            assert 0.99 * 0.01 <= step <= 0.01

    def test_matches_reference(self):
        rng = np.random.default_rng(0)
        grads = rng.normal(size=25).tolist()
        p, st = scalar_params(0.3), OptimizerState()
        for g in grads:
            p.fusion_w1.grad[:] = g
            adam_step(p, st, 0.05)
        assert p.fusion_w1.item() == pytest.approx(reference_adam(0.3, grads, 0.05), abs=1e-12)

    def test_minimises_quadratic(self):
        p, st = scalar_params(1.0), OptimizerState()
        w = p.fusion_w1
        for _ in range(200):
            backward(total_sum(mul(w, w)))
            adam_step(p, st, 0.1)
            if w.item() ** 2 < 1e-3:
                break
        assert w.item() ** 2 < 1e-3

    def test_clears_gradients(self):
        p = scalar_params()
        p.fusion_w1.grad[:] = 2.0
        adam_step(p, OptimizerState(), 0.1)
        assert p.fusion_w1.grad[0, 0] == 0.0

    def test_decoupled_weight_decay(self):
        p = scalar_params(2.0)
        adam_step(p, OptimizerState(), 0.1, weight_decay=0.5)
        assert p.fusion_w1.item() == pytest.approx(2.0 * (1 - 0.05))


class TestConfig:
    def test_lr_schedule(self):
        cfg = TrainConfig(learning_rate=1e-3, lr_halving_interval=2000)
        assert cfg.lr_at(0) == 1e-3 and cfg.lr_at(1999) == 1e-3
        assert cfg.lr_at(2000) == 5e-4 and cfg.lr_at(4500) == 2.5e-4

    @pytest.mark.parametrize("kwargs", [{"learning_rate": 0.0}, {"weight_decay": -1.0}, {"batch_tasks": 0},
                                        {"n_way": 1}, {"setting": "x"}, {"query_dist": "x"}])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestTrain:
    def test_record_schedule(self, tiny):
        train_ds, test_ds, cfg, acfg = tiny
        res = train(train_ds, cfg, acfg, eval_ds=test_ds)
        assert [r["episode"] for r in res.log] == [3, 6]
        assert set(res.log[0]) == {"episode", "mean_loss", "eval_accuracy", "lr"}
        assert res.log[1]["lr"] == 5e-3
        assert res.log[0]["mean_loss"] == pytest.approx(np.mean(res.loss_curve[:3]))

    def test_deterministic(self, tiny):
        train_ds, test_ds, cfg, acfg = tiny
        a = train(train_ds, cfg, acfg, eval_ds=test_ds)
        b = train(train_ds, cfg, acfg, eval_ds=test_ds)
        assert a.log == b.log
        for (_, x), (_, y) in zip(a.params.named_tensors(), b.params.named_tensors()):
            assert x.data.tobytes() == y.data.tobytes()

    def test_learning_rate_zero_keeps_params(self, tiny):
        train_ds, _, cfg, acfg = tiny
        params = initial_state(train_ds.d, cfg, acfg).params
        before = [t.data.copy() for t in params.tensors()]
        for t in params.tensors():
            t.grad[:] = 1.0
        adam_step(params, OptimizerState(), 0.0, weight_decay=1e-6)
        for b, t in zip(before, params.tensors()):
            assert b.tobytes() == t.data.tobytes()

    def test_loss_decreases(self):
        ds = generate_synthetic(8, 20, 4, 5.0, 1.0, seed=2)
        cfg = TrainConfig(learning_rate=1e-2, batch_tasks=4, total_episodes=60, eval_interval=60,
                          eval_episodes=5, seed=0, n_way=3, k_shot=1, q_query=2)
        curve = train(ds, cfg, AttentionConfig(layers=2, hidden_m=4)).loss_curve
        assert np.mean(curve[-10:]) < np.mean(curve[:10])

    def test_resume_matches_uninterrupted(self, tiny, tmp_path):
        train_ds, test_ds, cfg, acfg = tiny
        full = train(train_ds, cfg, acfg, eval_ds=test_ds)
        part = train(train_ds, cfg, acfg, eval_ds=test_ds, stop_after=4)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, part.state, {"note": "partial"})
        state = load_checkpoint(path, train_ds.d, cfg, acfg)
        assert state.episode == 4 and len(state.interval_losses) == 1
        rest = train(train_ds, cfg, acfg, eval_ds=test_ds, state=state)
        assert part.log + rest.log == full.log
        for (_, x), (_, y) in zip(full.params.named_tensors(), rest.params.named_tensors()):
            assert x.data.tobytes() == y.data.tobytes()


class TestCheckpointErrors:
    @pytest.fixture
    def saved(self, tiny, tmp_path):
        train_ds, _, cfg, acfg = tiny
        path = tmp_path / "c.json"
        save_checkpoint(path, initial_state(train_ds.d, cfg, acfg))
        return path, train_ds.d, cfg, acfg

    def test_truncated_payload(self, saved):
        path, d, cfg, acfg = saved
        doc = json.loads(path.read_text())
        doc["params"][0]["values"] = doc["params"][0]["values"][:4]
        path.write_text(json.dumps(doc))
        with pytest.raises(CheckpointError, match="expected"):
            load_checkpoint(path, d, cfg, acfg)

    def test_bad_base64(self, saved):
        path, d, cfg, acfg = saved
        doc = json.loads(path.read_text())
        doc["params"][0]["values"] = "!!!"
        path.write_text(json.dumps(doc))
        with pytest.raises(CheckpointError, match="base64"):
            load_checkpoint(path, d, cfg, acfg)

    def test_not_json(self, saved):
        path, d, cfg, acfg = saved
        path.write_text("{nope")
        with pytest.raises(CheckpointError):
            load_checkpoint(path, d, cfg, acfg)

    def test_wrong_format(self, saved):
        path, d, cfg, acfg = saved
        path.write_text(json.dumps({"format": "other"}))
        with pytest.raises(CheckpointError, match="format"):
            load_checkpoint(path, d, cfg, acfg)

    def test_shape_mismatch_names_parameter(self, saved):
        path, d, cfg, acfg = saved
        with pytest.raises(CheckpointError, match=r"parameter .*shape"):
            load_checkpoint(path, d + 1, cfg, acfg)

    def test_architecture_mismatch(self, saved):
        path, d, cfg, acfg = saved
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(path, d, cfg, AttentionConfig(layers=3, hidden_m=3))


class TestEvaluate:
    def test_perfect_stub_forward(self, tiny):
        _, test_ds, cfg, acfg = tiny

        def oracle(task, params, acfg):
            logits = np.zeros((task.Q, task.n_way))
            logits[np.arange(task.Q), task.truth] = 1.0
            return Tensor(logits)

        params = initial_state(test_ds.d, cfg, acfg).params
        acc, ci = evaluate(params, test_ds, cfg, acfg, episodes=10, forward=oracle)
        assert acc == 1.0 and ci == 0.0

    def test_single_episode_has_no_interval(self, tiny):
        _, test_ds, cfg, acfg = tiny
        params = initial_state(test_ds.d, cfg, acfg).params
        _, ci = evaluate(params, test_ds, cfg, acfg, episodes=1)
        assert ci is None

    def test_untrained_near_chance(self):
        ds = generate_synthetic(40, 30, 16, 5.0, 1.0, seed=7)
        _, test_ds = split_classes(ds, 20)
        cfg = TrainConfig(seed=0, n_way=5, k_shot=1, q_query=5)
        acfg = AttentionConfig()
        params = initial_state(test_ds.d, cfg, acfg).params
        acc, _ = evaluate(params, test_ds, cfg, acfg, episodes=1000)
        assert 0.16 <= acc <= 0.24
