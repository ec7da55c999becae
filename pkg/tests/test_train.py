"""Optimizer semantics, loss contracts, seeded training loops, and the
gradient-check harness."""

import json

import numpy as np
import pytest

import oracles
from selformer.data import extract_patches, synth_scene
from selformer.model import ModelConfig, init_model
from selformer.tensor import Tensor, parameter
from selformer.train import (
    AdamW,
    GRADCHECK_THRESHOLD,
    TrainConfig,
    cross_entropy,
    format_gradcheck_report,
    predict,
    run_gradcheck,
    train_loop,
)


class TestTrainConfig:
    def test_reference_defaults(self):
        config = TrainConfig()
        assert config.learning_rate == 1e-4
        assert config.weight_decay == 1e-5
        assert config.epochs == 500
        assert config.batch_size == 64
        assert (config.beta1, config.beta2, config.eps) == (0.9, 0.999, 1e-8)

    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-1.0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(beta1=1.0)


class TestAdamW:
    def test_zero_grad_zero_decay_keeps_params(self):
        p = parameter(np.array([1.0, -2.0]))
        opt = AdamW([p], TrainConfig(weight_decay=0.0))
        p.grad = np.zeros(2)
        for _ in range(5):
            opt.step()
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_moves_by_learning_rate(self):
        p = parameter(np.array([1.0]))
        opt = AdamW([p], TrainConfig(learning_rate=0.1, weight_decay=0.0))
        p.grad = np.array([1.0])
        opt.step()
        # bias-corrected first step is lr * g / (|g| + eps)
        assert p.data[0] == pytest.approx(0.9, abs=1e-6)

    def test_decay_shrinks_when_gradient_is_zero(self):
        lr, wd = 0.05, 0.2
        p = parameter(np.array([2.0]))
        opt = AdamW([p], TrainConfig(learning_rate=lr, weight_decay=wd))
        p.grad = np.array([0.0])
        for step in range(1, 4):
            opt.step()
            assert p.data[0] == pytest.approx(2.0 * (1 - lr * wd) ** step, rel=1e-12)

    def test_zero_decay_matches_plain_adam_oracle(self):
        rng = np.random.default_rng(0)
        start = rng.normal(size=5)
        grads = [rng.normal(size=5) for _ in range(10)]
        config = TrainConfig(learning_rate=1e-3, weight_decay=0.0)
        p = parameter(start.copy())
        opt = AdamW([p], config)
        for g in grads:
            p.grad = g.copy()
            opt.step()
        # straight-line Adam
        theta = start.copy()
        m = np.zeros(5)
        v = np.zeros(5)
        for t, g in enumerate(grads, start=1):
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9 ** t)
            vhat = v / (1 - 0.999 ** t)
            theta -= 1e-3 * mhat / (np.sqrt(vhat) + 1e-8)
        assert np.max(np.abs(p.data - theta)) < 1e-12

    def test_missing_grad_treated_as_zero(self):
        p = parameter(np.ones(3))
        opt = AdamW([p], TrainConfig(weight_decay=0.0))
        opt.step()
        assert np.array_equal(p.data, np.ones(3))


class TestCrossEntropy:
    def test_uniform_logits_log_k(self):
        for k in (2, 5, 9):
            logits = Tensor(np.zeros((3, k)))
            loss = cross_entropy(logits, np.zeros(3, dtype=int))
            assert loss.item() == pytest.approx(np.log(k), rel=1e-12)

    def test_confident_correct_goes_to_zero(self):
        logits = np.full((2, 4), -50.0)
        logits[0, 1] = 50.0
        logits[1, 2] = 50.0
        loss = cross_entropy(Tensor(logits), np.array([1, 2]))
        assert loss.item() < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x = parameter(rng.normal(size=(4, 5)))
        targets = rng.integers(0, 5, size=4)
        loss = cross_entropy(x, targets)
        loss.backward()
        numeric = oracles.numeric_gradient(
            lambda: cross_entropy(Tensor(x.data), targets).item(), x.data
        )
        assert oracles.max_rel_err(x.grad, numeric) < 1e-6

    def test_target_validation(self):
        with pytest.raises(ValueError, match="targets"):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def tiny_training_setup(seed, epochs, lr=1e-3, per_class=8):
    scene = synth_scene(classes=3, bands=4, height=16, width=16, noise=0.05, seed=seed)
    patches = extract_patches(scene.data, scene.labels, width=4)
    rng = np.random.default_rng(seed)
    train_idx = []
    for label in (1, 2, 3):
        members = np.flatnonzero(patches.class_ids == label)
        train_idx += list(rng.choice(members, size=per_class, replace=False))
    train_idx = np.array(train_idx)
    config = ModelConfig.tiny(class_count=3)
    params = init_model(config, seed=seed)
    train_config = TrainConfig(
        learning_rate=lr, weight_decay=1e-5, epochs=epochs, batch_size=16, seed=seed
    )
    cubes = patches.cubes[train_idx]
    targets = patches.class_ids[train_idx] - 1
    return params, config, train_config, cubes, targets


class TestTrainLoop:
    def test_zero_learning_rate_freezes_parameters(self):
        params, config, train_config, cubes, targets = tiny_training_setup(3, epochs=2)
        frozen = TrainConfig(
            learning_rate=0.0, weight_decay=0.0, epochs=2, batch_size=16, seed=3
        )
        before = [t.data.copy() for t in params.tensors()]
        train_loop(params, config, frozen, cubes, targets)
        for prev, t in zip(before, params.tensors()):
            assert np.array_equal(prev, t.data)

    def test_loss_decreases_on_separable_scene(self):
        params, config, train_config, cubes, targets = tiny_training_setup(5, epochs=12)
        result = train_loop(params, config, train_config, cubes, targets)
        assert result.log[-1]["loss"] < result.log[0]["loss"]

    def test_log_schema_and_files(self, tmp_path):
        params, config, train_config, cubes, targets = tiny_training_setup(7, epochs=2)
        result = train_loop(params, config, train_config, cubes, targets, run_dir=tmp_path)
        lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 2
        for line in lines:
            entry = json.loads(line)
            assert set(entry) == {"epoch", "loss", "train_acc", "wall_ms"}
        assert result.checkpoint_path is not None and result.checkpoint_path.exists()

    def test_same_seed_single_thread_bitwise_identical(self, tmp_path):
        runs = []
        for name in ("a", "b"):
            params, config, train_config, cubes, targets = tiny_training_setup(11, epochs=3)
            train_loop(params, config, train_config, cubes, targets,
                       run_dir=tmp_path / name)
            runs.append(tmp_path / name)
        ckpt_a = (runs[0] / "checkpoint.bin").read_bytes()
        ckpt_b = (runs[1] / "checkpoint.bin").read_bytes()
        assert ckpt_a == ckpt_b
        log_a = [json.loads(l) for l in (runs[0] / "train_log.jsonl").read_text().splitlines()]
        log_b = [json.loads(l) for l in (runs[1] / "train_log.jsonl").read_text().splitlines()]
        for ea, eb in zip(log_a, log_b):
            ea.pop("wall_ms")
            eb.pop("wall_ms")
        assert log_a == log_b

    def test_predict_matches_argmax(self):
        params, config, _, cubes, targets = tiny_training_setup(13, epochs=1)
        from selformer.model import forward
        from selformer.tensor import no_grad

        got = predict(params, config, cubes[:10], batch_size=4)
        with no_grad():
            want = np.argmax(forward(Tensor(cubes[:10]), params, config).data, axis=1)
        assert np.array_equal(got, want)

    def test_mismatched_lengths_rejected(self):
        params, config, train_config, cubes, targets = tiny_training_setup(17, epochs=1)
        with pytest.raises(ValueError, match="targets"):
            train_loop(params, config, train_config, cubes, targets[:-1])


class TestGradcheckHarness:
    def test_all_modules_pass(self):
        results = run_gradcheck(seed=0, coords_per_tensor=4)
        assert all(r.max_rel_err < GRADCHECK_THRESHOLD for r in results), \
            format_gradcheck_report(results)
        names = {r.module for r in results}
        assert "block:kernel_selective" in names
        assert "block:token_selective" in names
        assert "model:tiny" in names
        assert any(n.startswith("op:conv2d") for n in names)

    def test_report_format(self):
        results = run_gradcheck(seed=1, coords_per_tensor=2)
        report = format_gradcheck_report(results)
        assert "model:tiny" in report
        assert "max_rel_err" in report
