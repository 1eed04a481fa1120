"""Tests for cross linear attention fusion."""

from __future__ import annotations

import numpy as np
import pytest

from bevlab.errors import BoundsError, DimensionError, MemoryGuardError, ValidationError
from bevlab.fusion.clfm import (
    BranchWeights,
    ClfmFusion,
    ClfmParams,
    RopeTable,
    clfm_forward,
    kernelize,
    linear_cross_attention,
    qkv_project,
    quadratic_oracle,
    shortcut,
)
from bevlab.storage import load_bundle, save_bundle
from bevlab.tensor import activation, conv2d, depthwise_conv2d, linear, make_rng


def rel_err(got: np.ndarray, want: np.ndarray) -> float:
    return float(np.max(np.abs(got.astype(np.float64) - want.astype(np.float64))) / np.max(np.abs(want)))


def positive_qkv(seed: int, length: int, channels: int = 16, dtype=np.float32):
    rng = make_rng(seed)
    q = activation(rng.standard_normal((length, channels)), "elu_plus_one").astype(dtype)
    k = activation(rng.standard_normal((length, channels)), "elu_plus_one").astype(dtype)
    v = rng.standard_normal((length, channels)).astype(dtype)
    return q, k, v


class TestProjections:
    def test_zero_input_gives_zero_qkv(self):
        branch = BranchWeights.random(8, make_rng(0))
        q, k, v = qkv_project(np.zeros((4, 4, 8), dtype=np.float32), branch)
        assert q.shape == (16, 8)
        assert not (q.any() or k.any() or v.any())

    def test_matches_stagewise_composition(self, rng):
        branch = BranchWeights.random(8, make_rng(1), dtype=np.float64)
        bev = rng.standard_normal((4, 5, 8))
        hidden = conv2d(bev @ branch.in_proj, branch.conv)
        flat = (hidden / (1.0 + np.exp(-hidden))).reshape(20, 8)
        q, k, v = qkv_project(bev, branch)
        assert np.allclose(q, flat @ branch.q_proj)
        assert np.allclose(k, flat @ branch.k_proj)
        assert np.allclose(v, flat @ branch.v_proj)

    def test_depthwise_branch(self, rng):
        branch = BranchWeights.random(8, make_rng(1), depthwise=True, dtype=np.float64)
        bev = rng.standard_normal((4, 5, 8))
        hidden = depthwise_conv2d(bev @ branch.in_proj, branch.conv)
        flat = (hidden / (1.0 + np.exp(-hidden))).reshape(20, 8)
        assert branch.depthwise
        assert np.allclose(qkv_project(bev, branch)[0], flat @ branch.q_proj)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            qkv_project(np.zeros((4, 4, 6)), BranchWeights.random(8, make_rng(0)))

    def test_shortcut_zero(self):
        branch = BranchWeights.random(8, make_rng(0))
        assert not shortcut(np.zeros((3, 3, 8), dtype=np.float32), branch).any()

    def test_shortcut_identity_is_silu(self, rng):
        bev = rng.standard_normal((3, 3, 8))
        branch = BranchWeights.identity(8, dtype=np.float64)
        assert np.allclose(shortcut(bev, branch), activation(bev, "silu").reshape(9, 8))


class TestRope:
    def test_first_position_is_identity(self, rng):
        x = rng.standard_normal((16, 8))
        out = kernelize(x, RopeTable.flat(16, 4), "elu_plus_one", heads=2)
        assert np.allclose(out[0], activation(x[0], "elu_plus_one"))

    @pytest.mark.parametrize("mode", ["flat", "axial"])
    def test_preserves_head_norms(self, rng, mode):
        x = rng.standard_normal((64, 16)).astype(np.float32)
        table = RopeTable.flat(64, 4) if mode == "flat" else RopeTable.axial(8, 8, 4)
        out = kernelize(x, table, "elu_plus_one", heads=4)
        before = np.linalg.norm(activation(x, "elu_plus_one").reshape(64, 4, 4), axis=2)
        after = np.linalg.norm(out.reshape(64, 4, 4), axis=2)
        assert np.max(np.abs(after - before)) <= 1e-5

    def test_inner_product_depends_on_offset_only(self, rng):
        length, heads, head_dim = 16, 2, 4
        table = RopeTable.flat(length, head_dim)
        q = np.tile(rng.standard_normal(heads * head_dim), (length, 1))
        k = np.tile(rng.standard_normal(heads * head_dim), (length, 1))
        qr = kernelize(q, table, "elu", heads).reshape(length, heads, head_dim)
        kr = kernelize(k, table, "elu", heads).reshape(length, heads, head_dim)
        gram = np.einsum("mhd,phd->hmp", qr, kr)
        for m in range(length - 1):
            for p in range(length - 1):
                assert np.allclose(gram[:, m, p], gram[:, m + 1, p + 1])

    def test_disabled_is_identity(self, rng):
        x = rng.standard_normal((10, 8))
        assert np.allclose(RopeTable.disabled(10, 4).apply(x, 2), x)

    def test_overflow(self):
        with pytest.raises(BoundsError):
            RopeTable.flat(4, 4).apply(np.zeros((5, 8)), 2)

    def test_odd_head_dim(self):
        with pytest.raises(DimensionError):
            RopeTable.flat(4, 3)


class TestLinearCrossAttention:
    def test_zero_keys_give_zero_output(self, rng):
        q = rng.uniform(0.5, 1.5, (8, 8))
        v = rng.standard_normal((8, 8))
        assert not linear_cross_attention(q, np.zeros((8, 8)), v, heads=2).any()

    def test_single_key_returns_its_value(self, rng):
        q = rng.uniform(0.5, 1.5, (5, 4))
        k = rng.uniform(0.5, 1.5, (1, 4))
        v = rng.standard_normal((1, 4))
        out = linear_cross_attention(q, k, v, heads=1, epsilon=0.0)
        assert np.allclose(out, np.repeat(v, 5, axis=0))

    @pytest.mark.parametrize("length", [16, 64, 256, 1024])
    def test_associativity_f32(self, length):
        for seed in range(50):
            q, k, v = positive_qkv(seed, length)
            linear_out = linear_cross_attention(q, k, v, heads=4)
            assert rel_err(linear_out, quadratic_oracle(q, k, v, heads=4)) <= 1e-5

    @pytest.mark.parametrize("length", [16, 64, 256, 1024])
    def test_associativity_f64(self, length):
        for seed in range(50):
            q, k, v = positive_qkv(seed, length, dtype=np.float64)
            linear_out = linear_cross_attention(q, k, v, heads=4)
            assert rel_err(linear_out, quadratic_oracle(q, k, v, heads=4)) <= 1e-10

    def test_head_dim_scale_mode(self):
        q, k, v = positive_qkv(3, 32, dtype=np.float64)
        linear_out = linear_cross_attention(q, k, v, heads=4, scale="head_dim")
        assert rel_err(linear_out, quadratic_oracle(q, k, v, heads=4, scale="head_dim")) <= 1e-10

    def test_head_split_mismatch(self):
        with pytest.raises(DimensionError):
            linear_cross_attention(np.ones((4, 6)), np.ones((4, 6)), np.ones((4, 6)), heads=4)

    def test_memory_guard(self):
        q, k, v = positive_qkv(0, 32)
        with pytest.raises(MemoryGuardError):
            quadratic_oracle(q, k, v, heads=4, max_scores=100)

    def test_finite_under_rope(self):
        rng = make_rng(7)
        table = RopeTable.flat(10_000, 4)
        q = kernelize(rng.standard_normal((10_000, 8)).astype(np.float32), table, "elu_plus_one", 2)
        k = kernelize(rng.standard_normal((10_000, 8)).astype(np.float32), table, "elu_plus_one", 2)
        v = rng.standard_normal((10_000, 8)).astype(np.float32)
        assert np.isfinite(linear_cross_attention(q, k, v, heads=2)).all()


class TestClfmForward:
    def test_output_shape(self, rng):
        params = ClfmParams.init(8, 4, seed=0)
        x = rng.standard_normal((6, 7, 8)).astype(np.float32)
        y = rng.standard_normal((6, 7, 8)).astype(np.float32)
        assert clfm_forward(x, y, params).shape == (6, 7, 8)

    def test_oracle_substitution(self, rng):
        params = ClfmParams.init(8, 4, seed=3, dtype=np.float64)
        x, y = rng.standard_normal((16, 16, 8)), rng.standard_normal((16, 16, 8))
        fused = clfm_forward(x, y, params)
        oracle = clfm_forward(x, y, params, attention=quadratic_oracle)
        assert rel_err(fused, oracle) <= 1e-5

    def test_identical_inputs_with_shared_weights(self, rng):
        base = ClfmParams.init(8, 2, seed=5, dtype=np.float64)
        params = ClfmParams(lidar=base.lidar, image=base.lidar, fuse=base.fuse, heads=2)
        x = rng.standard_normal((4, 4, 8))
        rope = params.rope_table(4, 4)
        q, k, v = qkv_project(x, params.lidar)
        x_hat = linear_cross_attention(
            kernelize(q, rope, params.feature_map, 2), kernelize(k, rope, params.feature_map, 2), v, 2
        )
        gated = linear(x_hat * shortcut(x, params.lidar), params.lidar.out_proj)
        expected = conv2d((2.0 * gated).reshape(4, 4, 8), params.fuse[None, None])
        assert np.allclose(clfm_forward(x, x.copy(), params), expected)

    def test_zero_image_branch(self, rng):
        params = ClfmParams.init(8, 4, seed=0, dtype=np.float64, feature_map="elu")
        x = rng.standard_normal((5, 5, 8))
        assert not clfm_forward(x, np.zeros_like(x), params).any()

    def test_deterministic(self, rng):
        x = rng.standard_normal((6, 6, 8)).astype(np.float32)
        y = rng.standard_normal((6, 6, 8)).astype(np.float32)
        first = clfm_forward(x, y, ClfmParams.init(8, 4, seed=11))
        second = clfm_forward(x, y, ClfmParams.init(8, 4, seed=11))
        assert first.tobytes() == second.tobytes()

    @pytest.mark.parametrize("rope", ["flat", "axial", "none"])
    def test_rope_modes(self, rng, rope):
        params = ClfmParams.init(8, 2, seed=0, dtype=np.float64, rope=rope)
        x, y = rng.standard_normal((4, 6, 8)), rng.standard_normal((4, 6, 8))
        assert np.isfinite(clfm_forward(x, y, params)).all()

    def test_shape_mismatch(self):
        params = ClfmParams.init(8, 4, seed=0)
        with pytest.raises(DimensionError):
            clfm_forward(np.zeros((4, 4, 8)), np.zeros((4, 5, 8)), params)

    def test_fusion_wrapper_oracle_flag(self, rng):
        params = ClfmParams.init(8, 4, seed=2, dtype=np.float64)
        x, y = rng.standard_normal((8, 8, 8)), rng.standard_normal((8, 8, 8))
        fused = ClfmFusion(params).fuse(x, y)
        assert rel_err(fused, ClfmFusion(params, oracle=True).fuse(x, y)) <= 1e-5


class TestClfmParams:
    def test_heads_must_divide_channels(self):
        with pytest.raises(ValidationError):
            ClfmParams.init(8, 3, seed=0)

    def test_unknown_feature_map(self):
        with pytest.raises(ValidationError):
            ClfmParams.init(8, 4, seed=0, feature_map="relu")

    def test_bundle_round_trip(self, tmp_path, rng):
        params = ClfmParams.init(8, 2, seed=4, rope="axial", epsilon=1e-5)
        save_bundle(tmp_path / "params", params.named_weights(), params.meta())
        loaded = ClfmParams.from_bundle(*load_bundle(tmp_path / "params"))
        assert loaded.rope == "axial"
        assert loaded.epsilon == 1e-5
        x = rng.standard_normal((4, 4, 8)).astype(np.float32)
        y = rng.standard_normal((4, 4, 8)).astype(np.float32)
        assert clfm_forward(x, y, loaded).tobytes() == clfm_forward(x, y, params).tobytes()

    def test_bundle_missing_weight(self):
        params = ClfmParams.init(8, 2, seed=4)
        tensors = params.named_weights()
        del tensors["image.q_proj"]
        with pytest.raises(ValidationError, match="image.q_proj"):
            ClfmParams.from_bundle(tensors, {k: str(v) for k, v in params.meta().items()})
