"""Tests for the fusion scheme registry and the baseline schemes."""

from __future__ import annotations

import numpy as np
import pytest

from bevlab.errors import DimensionError, MemoryGuardError, ValidationError
from bevlab.fusion import (
    FUSION_SCHEMES,
    ClfmFusion,
    ConvFusion,
    CrossAttentionFusion,
    SelfAttentionFusion,
    make_fusion,
)
from bevlab.fusion.base import softmax_attention


@pytest.fixture
def bev_pair(rng):
    lidar = rng.standard_normal((6, 6, 8)).astype(np.float32)
    image = rng.standard_normal((6, 6, 8)).astype(np.float32)
    return lidar, image


class TestRegistry:
    def test_all_schemes_registered(self):
        assert set(FUSION_SCHEMES) == {"clfm", "conv", "sa", "ca"}

    @pytest.mark.parametrize("scheme", ["clfm", "conv", "sa", "ca"])
    def test_output_shape(self, bev_pair, scheme):
        fusion = make_fusion(scheme, 8, heads=4, seed=0)
        assert fusion.fuse(*bev_pair).shape == (6, 6, 8)

    @pytest.mark.parametrize("scheme", ["clfm", "conv", "sa", "ca"])
    def test_seeded_weights_are_deterministic(self, bev_pair, scheme):
        first = make_fusion(scheme, 8, seed=3).fuse(*bev_pair)
        second = make_fusion(scheme, 8, seed=3).fuse(*bev_pair)
        assert first.tobytes() == second.tobytes()

    def test_unknown_scheme(self):
        with pytest.raises(ValidationError):
            make_fusion("transformer", 8)

    def test_types(self):
        assert isinstance(make_fusion("clfm", 8), ClfmFusion)
        assert isinstance(make_fusion("sa", 8), SelfAttentionFusion)
        assert isinstance(make_fusion("ca", 8), CrossAttentionFusion)

    def test_timed_fuse(self, bev_pair):
        fused, elapsed = make_fusion("conv", 8).timed_fuse(*bev_pair)
        assert fused.shape == (6, 6, 8)
        assert elapsed >= 0

    @pytest.mark.parametrize("scheme", ["clfm", "conv", "sa", "ca"])
    def test_channel_mismatch(self, scheme):
        fusion = make_fusion(scheme, 8)
        with pytest.raises(DimensionError):
            fusion.fuse(np.zeros((4, 4, 4), dtype=np.float32), np.zeros((4, 4, 4), dtype=np.float32))


class TestBaselines:
    def test_conv_can_pass_lidar_through(self, bev_pair):
        fusion = ConvFusion(8)
        fusion.kernel = np.zeros_like(fusion.kernel)
        fusion.kernel[1, 1, :8] = np.eye(8, dtype=np.float32)
        lidar, image = bev_pair
        assert np.allclose(fusion.fuse(lidar, image), lidar)

    def test_softmax_attention_with_uniform_keys_averages_values(self, rng):
        q = rng.standard_normal((5, 8))
        v = rng.standard_normal((7, 8))
        out = softmax_attention(q, np.zeros((7, 8)), v, heads=2)
        assert np.allclose(out, np.tile(v.mean(axis=0), (5, 1)))

    def test_self_attention_memory_guard(self, bev_pair):
        fusion = SelfAttentionFusion(8, max_scores=100)
        with pytest.raises(MemoryGuardError):
            fusion.fuse(*bev_pair)

    def test_cross_attention_memory_guard(self, bev_pair):
        fusion = CrossAttentionFusion(8, max_scores=100)
        with pytest.raises(MemoryGuardError):
            fusion.fuse(*bev_pair)
