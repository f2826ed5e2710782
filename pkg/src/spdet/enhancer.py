"""Bidirectional feature enhancer.

Refines the high-level feature map with positional self-attention, then runs
a stack of fusion layers in which image tokens and each text modality
cross-attend in both directions; a learnable scalar gate (initialized to
zero) scales the text contribution so an untrained or ablated model is
exactly text-free. The enhanced map is restored to its spatial layout,
upsampled, and channel-concatenated with the low-level map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import (
    AttentionWeights,
    FeedForwardWeights,
    LayerNormWeights,
    feed_forward,
    gauss_param,
    init_attention,
    init_feed_forward,
    init_layer_norm,
    layer_norm,
    linear_param,
    multi_head_attention,
)
from .tensor import Tensor, concat, matmul, take_flat, zeros

MODALITY_SCP = "scp"
MODALITY_DBP = "dbp"


@dataclass
class FeaturePyramid:
    """Two-level pyramid: x_high at the coarse stride, x_low at half that."""

    x_high: Tensor  # H x W x D_h
    x_low: Tensor  # 2H x 2W x D_l

    def __post_init__(self):
        h, w, _ = self.x_high.shape
        hl, wl, _ = self.x_low.shape
        if (hl, wl) != (2 * h, 2 * w):
            raise DimensionError(
                f"low-level map {hl}x{wl} must be exactly twice the high-level {h}x{w}"
            )


@dataclass
class TextEmbedding:
    embedding: Tensor  # N_t x D_t
    modality: str


@dataclass
class FusionBlockWeights:
    """One cross-modal fusion application for a single text modality."""

    vis_proj: Tensor  # D_h x D_shared
    text_proj: Tensor  # D_t x D_shared
    img_to_text: AttentionWeights
    text_to_img: AttentionWeights
    back_proj: Tensor  # D_shared x D_h
    gate: Tensor  # scalar
    norm: LayerNormWeights
    ffn: FeedForwardWeights


@dataclass
class FusionLayer:
    scp: FusionBlockWeights
    dbp: FusionBlockWeights


@dataclass
class EnhancerWeights:
    pos_encoding: Tensor  # L x D_h
    self_attn: AttentionWeights
    self_norm: LayerNormWeights
    self_ffn: FeedForwardWeights
    layers: list  # FusionLayer per depth step
    heads: int = 4
    fusion_order: str = "scp_first"


def init_fusion_block(rng, d_h, d_t, d_shared):
    return FusionBlockWeights(
        vis_proj=linear_param(rng, d_h, d_shared),
        text_proj=linear_param(rng, d_t, d_shared),
        img_to_text=init_attention(rng, d_shared),
        text_to_img=init_attention(rng, d_shared),
        back_proj=linear_param(rng, d_shared, d_h),
        gate=zeros((), requires_grad=True),
        norm=init_layer_norm(d_h),
        ffn=init_feed_forward(rng, d_h),
    )


def init_enhancer(rng, h, w, d_h, d_t_scp, d_t_dbp, d_shared, heads=4, depth=2,
                  fusion_order="scp_first"):
    if depth < 1:
        raise ConfigError(f"enhancer depth must be >= 1, got {depth}")
    if fusion_order not in ("scp_first", "dbp_first"):
        raise ConfigError(f"unknown fusion order {fusion_order!r}")
    layers = [
        FusionLayer(
            scp=init_fusion_block(rng, d_h, d_t_scp, d_shared),
            dbp=init_fusion_block(rng, d_h, d_t_dbp, d_shared),
        )
        for _ in range(depth)
    ]
    return EnhancerWeights(
        pos_encoding=gauss_param(rng, (h * w, d_h), 0.02),
        self_attn=init_attention(rng, d_h),
        self_norm=init_layer_norm(d_h),
        self_ffn=init_feed_forward(rng, d_h),
        layers=layers,
        heads=heads,
        fusion_order=fusion_order,
    )


def flatten_with_pe(x_high, pos_encoding):
    """Row-major flatten of H x W x D plus positions; also returns the plain
    flat map, which stays the value input of the self-attention stage."""
    h, w, d = x_high.shape
    if pos_encoding.shape != (h * w, d):
        raise DimensionError(
            f"positional encoding {pos_encoding.shape} does not match {h}x{w} tokens of dim {d}"
        )
    x_flat = x_high.reshape(h * w, d)
    return x_flat + pos_encoding, x_flat


def self_attend(x_flat, x_pos, attn, norm, ffn, heads):
    """Position-queried self-attention with residual, then norm + FFN with an
    outer residual."""
    attended = multi_head_attention(x_pos, x_pos, x_flat, heads, attn) + x_flat
    return feed_forward(layer_norm(attended, norm.gain, norm.bias), ffn) + attended


def project_shared(x_refined, text, vis_proj, text_proj):
    """Map both modalities into the shared fusion dimension."""
    return matmul(x_refined, vis_proj), matmul(text, text_proj)


def cross_attend_bidirectional(x_hat, t_hat, img_to_text, text_to_img, heads):
    """Image tokens query text, then the text-guided rows query the image.

    The first attention produces one text-conditioned row per image token, so
    the returned cross feature keeps L rows and adds cleanly to the visual
    residual stream.
    """
    t_guided = multi_head_attention(x_hat, t_hat, t_hat, heads, img_to_text)
    return multi_head_attention(t_guided, x_hat, x_hat, heads, text_to_img)


def fuse_residual(x_cross, x_refined, back_proj, gate, norm, ffn):
    """Project the cross features back and blend through the scalar gate."""
    x_proj = matmul(x_cross, back_proj)
    mixed = gate * x_proj + x_refined
    return feed_forward(layer_norm(mixed, norm.gain, norm.bias), ffn)


def apply_fusion_block(x_refined, text_embedding, block, heads):
    x_hat, t_hat = project_shared(x_refined, text_embedding, block.vis_proj, block.text_proj)
    x_cross = cross_attend_bidirectional(x_hat, t_hat, block.img_to_text, block.text_to_img, heads)
    return fuse_residual(x_cross, x_refined, block.back_proj, block.gate, block.norm, block.ffn)


def upsample_nearest_2x(x):
    """H x W x C -> 2H x 2W x C by pixel duplication (differentiable gather)."""
    h, w, c = x.shape
    src = np.arange(h * w * c).reshape(h, w, c)
    idx = src.repeat(2, axis=0).repeat(2, axis=1)
    return take_flat(x, idx)


def enhance(pyramid, scp, dbp, weights):
    """Full enhancement pass; returns 2H x 2W x (D_l + D_h)."""
    h, w, d_h = pyramid.x_high.shape
    x_pos, x_flat = flatten_with_pe(pyramid.x_high, weights.pos_encoding)
    x = self_attend(x_flat, x_pos, weights.self_attn, weights.self_norm,
                    weights.self_ffn, weights.heads)
    for layer in weights.layers:
        if weights.fusion_order == "scp_first":
            ordered = ((layer.scp, scp), (layer.dbp, dbp))
        else:
            ordered = ((layer.dbp, dbp), (layer.scp, scp))
        for block, text in ordered:
            x = apply_fusion_block(x, text.embedding, block, weights.heads)
    x_spatial = x.reshape(h, w, d_h)
    return concat([pyramid.x_low, upsample_nearest_2x(x_spatial)], axis=2)
