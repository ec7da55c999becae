"""Model assembly: shapes, determinism, parameter counts, head variants,
checkpoint round-trips, and a sampled full-model gradient check."""

import numpy as np
import pytest

import oracles
from selformer.model import (
    ModelConfig,
    count_parameters,
    forward,
    forward_features,
    head_logits,
    init_model,
    load_checkpoint,
    save_checkpoint,
)
from selformer.tensor import Tensor, no_grad, ops, parameter

PAVIA_REFERENCE_COUNT = 571_880


def tiny_setup(seed=0, classes=3):
    config = ModelConfig.tiny(class_count=classes)
    params = init_model(config, seed=seed)
    return config, params


class TestForward:
    def test_logits_shape(self):
        config, params = tiny_setup()
        rng = np.random.default_rng(1)
        batch = Tensor(rng.normal(size=(5, config.bands, config.patch_size, config.patch_size)))
        with no_grad():
            logits = forward(batch, params, config)
        assert logits.shape == (5, config.class_count)
        assert np.all(np.isfinite(logits.data))

    def test_identical_patches_identical_logits(self):
        config, params = tiny_setup(seed=3)
        rng = np.random.default_rng(4)
        patch = rng.normal(size=(config.bands, config.patch_size, config.patch_size))
        batch = Tensor(np.stack([patch, patch, patch + 1.0]))
        with no_grad():
            logits = forward(batch, params, config).data
        assert np.array_equal(logits[0], logits[1])
        assert not np.array_equal(logits[0], logits[2])

    def test_forward_is_deterministic(self):
        config, params = tiny_setup(seed=5)
        rng = np.random.default_rng(6)
        batch = Tensor(rng.normal(size=(2, config.bands, config.patch_size, config.patch_size)))
        with no_grad():
            a = forward(batch, params, config).data
            b = forward(batch, params, config).data
        assert np.array_equal(a, b)

    def test_band_mismatch_rejected(self):
        config, params = tiny_setup()
        bad = Tensor(np.zeros((1, config.bands + 1, config.patch_size, config.patch_size)))
        with pytest.raises(ValueError, match="bands"):
            forward(bad, params, config)

    def test_patch_size_mismatch_rejected(self):
        config, params = tiny_setup()
        bad = Tensor(np.zeros((1, config.bands, config.patch_size + 2, config.patch_size + 2)))
        with pytest.raises(ValueError, match="patch"):
            forward(bad, params, config)

    def test_mean_pool_head_spatial_permutation_invariant(self):
        config, params = tiny_setup(seed=7)
        rng = np.random.default_rng(8)
        batch = Tensor(rng.normal(size=(2, config.bands, config.patch_size, config.patch_size)))
        with no_grad():
            feats = forward_features(batch, params, config)
            logits = head_logits(feats, params, config).data
            b, c, gh, gw = feats.shape
            flat = feats.data.reshape(b, c, gh * gw)
            perm = np.random.default_rng(9).permutation(gh * gw)
            shuffled = Tensor(flat[:, :, perm].reshape(b, c, gh, gw))
            logits_perm = head_logits(shuffled, params, config).data
        assert np.max(np.abs(logits - logits_perm)) < 1e-12

    def test_center_head_reads_center_cell(self):
        config = ModelConfig.tiny()
        config_center = ModelConfig(**{**config.to_dict(), "head_mode": "center"})
        params = init_model(config_center, seed=10)
        rng = np.random.default_rng(11)
        feats = Tensor(rng.normal(size=(2, config.embed_dim, 3, 3)))
        with no_grad():
            got = head_logits(feats, params, config_center).data
            manual = head_logits(
                Tensor(np.broadcast_to(feats.data[:, :, 1:2, 2 - 1:2],
                                       feats.data.shape).copy()),
                params, config_center,
            ).data
        assert np.allclose(got, manual, atol=1e-12)

    def test_trace_collects_all_blocks(self):
        config, params = tiny_setup(seed=12)
        rng = np.random.default_rng(13)
        batch = Tensor(rng.normal(size=(1, config.bands, config.patch_size, config.patch_size)))
        with no_grad():
            _, record = forward(batch, params, config, trace=True)
        assert len(record.kernel) == config.stg_count
        assert len(record.attention) == config.stg_count * config.tstb_per_stg
        assert len(record.attention[0]) == config.heads


class TestConfigValidation:
    def test_indivisible_grid_rejected(self):
        with pytest.raises(ValueError, match="token_patch"):
            ModelConfig(class_count=3, patch_size=5, token_patch=2)

    def test_head_group_divisibility(self):
        with pytest.raises(ValueError, match="heads"):
            ModelConfig(class_count=3, embed_dim=100, heads=3)
        with pytest.raises(ValueError, match="groups"):
            ModelConfig(class_count=3, embed_dim=16, heads=2, groups=3)

    def test_roundtrip_dict(self):
        config = ModelConfig(class_count=9)
        assert ModelConfig.from_dict(config.to_dict()) == config


class TestParameterCount:
    def test_head_fc_closed_form(self):
        config = ModelConfig(class_count=9, bands=30)
        params = init_model(config, seed=0)
        head = {name: t for name, t in params.parameters() if name.startswith("head.fc")}
        assert sum(t.size for t in head.values()) == 128 * 9 + 9 == 1161

    def test_reference_geometry_count_in_band(self):
        params = init_model(ModelConfig(class_count=9, bands=30), seed=0)
        count = count_parameters(params)
        assert abs(count - PAVIA_REFERENCE_COUNT) <= 0.15 * PAVIA_REFERENCE_COUNT

    def test_class_count_delta_exact(self):
        base = count_parameters(init_model(ModelConfig(class_count=9, bands=30), seed=0))
        doubled = count_parameters(init_model(ModelConfig(class_count=18, bands=30), seed=0))
        assert doubled - base == 128 * 9 + 9

    def test_count_matches_sum_of_named(self):
        config, params = tiny_setup()
        assert count_parameters(params) == sum(t.size for _, t in params.parameters())


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        config, params = tiny_setup(seed=21)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, config)
        loaded_params, loaded_config = load_checkpoint(path)
        assert loaded_config == config
        for (name_a, a), (name_b, b) in zip(params.parameters(), loaded_params.parameters()):
            assert name_a == name_b
            assert a.data.tobytes() == b.data.tobytes()

    def test_save_is_deterministic(self, tmp_path):
        config, params = tiny_setup(seed=22)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(p1, params, config)
        save_checkpoint(p2, params, config)
        assert p1.read_bytes() == p2.read_bytes()

    def test_reload_preserves_forward(self, tmp_path):
        config, params = tiny_setup(seed=23)
        rng = np.random.default_rng(24)
        batch = Tensor(rng.normal(size=(2, config.bands, config.patch_size, config.patch_size)))
        with no_grad():
            before = forward(batch, params, config).data
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, config)
        loaded, loaded_config = load_checkpoint(path)
        with no_grad():
            after = forward(batch, loaded, loaded_config).data
        assert np.array_equal(before, after)

    def test_corrupt_header_version_rejected(self, tmp_path):
        config, params = tiny_setup()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, config)
        blob = path.read_bytes()
        tampered = blob.replace(b'"format_version": 1', b'"format_version": 9', 1)
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(tampered)
        with pytest.raises(ValueError, match="format"):
            load_checkpoint(bad)


def warm_params(params, seed, scale=0.3, qkv_scale=0.7):
    """Redraw weights at O(1) scale: at the 0.02 training init the attention
    scores are ~1e-5, so every selection margin is microscopic and finite
    differences straddle selection flips. The token-mixing path gets a larger
    scale so score gaps dominate the finite-difference step."""
    rng = np.random.default_rng(seed)
    for name, t in params.parameters():
        if name.endswith("ln.gain") or ".ln1.gain" in name or ".ln2.gain" in name:
            t.data[...] = 1.0 + rng.normal(scale=0.1, size=t.shape)
        elif "pconv" in name or "dwconv" in name:
            t.data[...] = rng.normal(scale=qkv_scale, size=t.shape)
        else:
            t.data[...] = rng.normal(scale=scale, size=t.shape)


def attention_margin(record, k):
    worst = np.inf
    for head_traces in record.attention:
        for t in head_traces:
            n = t.dense.shape[-1]
            m = ops.retained_count(k, n)
            if m >= n:
                continue
            ordered = np.sort(t.dense, axis=-1)[:, ::-1]
            worst = min(worst, float(np.min(ordered[:, m - 1] - ordered[:, m])))
    return worst


class TestFullModelGradients:
    def test_sampled_finite_difference_check(self):
        config, params = tiny_setup(seed=31)
        warm_params(params, seed=310)
        # batch of one so the traced margins cover the whole loss
        x = None
        rng = None
        for seed in range(32, 96):
            rng = np.random.default_rng(seed)
            cand = rng.normal(size=(1, config.bands, config.patch_size, config.patch_size))
            with no_grad():
                _, record = forward(Tensor(cand), params, config, trace=True)
            if attention_margin(record, config.select_rate) > 1e-2:
                x = parameter(cand)
                break
        assert x is not None, "no margin-safe evaluation point found"

        def run():
            return forward(x, params, config)

        out = run()
        proj = rng.normal(size=out.shape)
        ops.sum_all(ops.mul(out, Tensor(proj))).backward()

        def scalar():
            with no_grad():
                return float(np.sum(run().data * proj))

        coord_rng = np.random.default_rng(33)
        named = [("input", x)] + params.parameters()
        for name, t in named:
            assert t.grad is not None, f"{name} missing gradient"
            size = t.data.size
            picks = (
                np.arange(size) if size <= 12
                else coord_rng.choice(size, size=12, replace=False)
            )
            numeric = oracles.numeric_gradient_at(scalar, t.data, picks)
            analytic = t.grad.reshape(-1)
            for j, fd in numeric.items():
                err = oracles.max_rel_err(
                    np.array([analytic[j]]), np.array([fd])
                )
                assert err < 1e-4, f"{name}[{j}]: {err:.3e}"
