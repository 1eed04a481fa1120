"""LiDAR/image BEV fusion schemes."""

from __future__ import annotations

from ..errors import ValidationError
from .base import MAX_SCORES, BaseFusion
from .clfm import ClfmFusion, ClfmParams, clfm_forward, linear_cross_attention, quadratic_oracle
from .conv import ConvFusion
from .cross_attention import CrossAttentionFusion
from .self_attention import SelfAttentionFusion

FUSION_SCHEMES: dict[str, type[BaseFusion]] = {
    cls.name: cls for cls in (ClfmFusion, ConvFusion, SelfAttentionFusion, CrossAttentionFusion)
}


def make_fusion(
    scheme: str,
    channels: int,
    heads: int = 4,
    seed: int = 0,
    params: ClfmParams | None = None,
    max_scores: int | None = MAX_SCORES,
) -> BaseFusion:
    """Build a fusion scheme by name with seeded weights."""
    if scheme not in FUSION_SCHEMES:
        raise ValidationError(f"unknown fusion scheme {scheme!r}; choose from {sorted(FUSION_SCHEMES)}")
    if scheme == "clfm":
        return ClfmFusion(params or ClfmParams.init(channels, heads, seed))
    if scheme == "conv":
        return ConvFusion(channels, seed=seed)
    return FUSION_SCHEMES[scheme](channels, heads=heads, seed=seed, max_scores=max_scores)


__all__ = [
    "FUSION_SCHEMES",
    "BaseFusion",
    "ClfmFusion",
    "ClfmParams",
    "ConvFusion",
    "CrossAttentionFusion",
    "SelfAttentionFusion",
    "clfm_forward",
    "linear_cross_attention",
    "make_fusion",
    "quadratic_oracle",
]
