"""Neural building blocks on top of the autodiff tensors.

Weight containers are plain dataclasses of tensors; ``named_parameters``
walks any nesting of dataclasses / lists / dicts and yields stable
``(dotted.name, tensor)`` pairs, which the optimizer, checkpointing and the
finite-difference verifier all share.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, concat, gelu, matmul, narrow, softmax_rows, take_flat


def gauss_param(rng, shape, scale):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)


def linear_param(rng, fan_in, fan_out):
    return gauss_param(rng, (fan_in, fan_out), 1.0 / math.sqrt(fan_in))


def zeros_param(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape):
    return Tensor(np.ones(shape), requires_grad=True)


def named_parameters(obj, prefix=""):
    """Yield (name, tensor) for every requires_grad tensor reachable from obj."""
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
        return
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_parameters(item, f"{prefix}.{i}")
        return
    if isinstance(obj, dict):
        for key in obj:
            yield from named_parameters(obj[key], f"{prefix}.{key}")
        return
    # scalars / ints / strings carry no parameters


@dataclass
class AttentionWeights:
    """Query/key/value/output projections for one attention module."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def init_attention(rng, dim, value_dim=None):
    dv = dim if value_dim is None else value_dim
    return AttentionWeights(
        wq=linear_param(rng, dim, dim),
        bq=zeros_param(dim),
        wk=linear_param(rng, dim, dim),
        bk=zeros_param(dim),
        wv=linear_param(rng, dv, dv),
        bv=zeros_param(dv),
        wo=linear_param(rng, dv, dv),
        bo=zeros_param(dv),
    )


def multi_head_attention(q, k, v, heads, weights):
    """Scaled dot-product attention with ``heads`` parallel heads.

    q: n_q x d, k: n_k x d, v: n_k x d_v; returns n_q x d_v. Both d and d_v
    must be divisible by ``heads``.
    """
    d = q.shape[1]
    dv = v.shape[1]
    if k.shape[1] != d:
        raise DimensionError(f"query dim {d} != key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError("key and value row counts differ")
    if d % heads != 0 or dv % heads != 0:
        raise ConfigError(f"head count {heads} must divide dims {d} and {dv}")
    qp = matmul(q, weights.wq) + weights.bq
    kp = matmul(k, weights.wk) + weights.bk
    vp = matmul(v, weights.wv) + weights.bv
    dh = d // heads
    dvh = dv // heads
    scale = 1.0 / math.sqrt(dh)
    head_outs = []
    for h in range(heads):
        qh = narrow(qp, 1, h * dh, dh)
        kh = narrow(kp, 1, h * dh, dh)
        vh = narrow(vp, 1, h * dvh, dvh)
        attn = softmax_rows(matmul(qh, kh.T) * scale)
        head_outs.append(matmul(attn, vh))
    joined = head_outs[0] if heads == 1 else concat(head_outs, axis=1)
    return matmul(joined, weights.wo) + weights.bo


@dataclass
class LayerNormWeights:
    gain: Tensor
    bias: Tensor


def init_layer_norm(dim):
    return LayerNormWeights(gain=ones_param(dim), bias=zeros_param(dim))


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / (var + eps).sqrt() * gain + bias


@dataclass
class FeedForwardWeights:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


FFN_EXPANSION = 4


def init_feed_forward(rng, dim):
    hidden = FFN_EXPANSION * dim
    return FeedForwardWeights(
        w1=linear_param(rng, dim, hidden),
        b1=zeros_param(hidden),
        w2=linear_param(rng, hidden, dim),
        b2=zeros_param(dim),
    )


def feed_forward(x, weights):
    """Two affine layers around a smooth activation; no internal residual."""
    hidden = gelu(matmul(x, weights.w1) + weights.b1)
    return matmul(hidden, weights.w2) + weights.b2


def gather_rows(table, row_ids):
    """Differentiable row lookup: table is m x d, returns len(row_ids) x d."""
    ids = np.asarray(row_ids, dtype=np.int64)
    d = table.shape[1]
    idx = ids[:, None] * d + np.arange(d)
    return take_flat(table, idx)


def l2_normalize_rows(x):
    """Scale each row to unit Euclidean norm (guarded for zero rows)."""
    sq = (x * x).sum(axis=1, keepdims=True)
    return x / (sq + 1e-24).sqrt()
