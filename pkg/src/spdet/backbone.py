"""Fixed-shape convolutional stub producing the two-level feature pyramid.

A stack of stride-2 3x3 convolutions takes the grayscale image to the
low-level map at stride 8; one more stride-2 convolution produces the
high-level map at stride 16. Convolutions are im2col gathers followed by a
matmul, so the whole stub is differentiable through the tensor primitives.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .enhancer import FeaturePyramid
from .errors import ConfigError
from .nn import linear_param, zeros_param
from .tensor import Tensor, gelu, matmul, pad_hw, take_flat

KERNEL = 3
STRIDE = 2
PAD = 1


@dataclass
class ConvLayer:
    weight: Tensor  # (k*k*c_in) x c_out
    bias: Tensor


@dataclass
class StubEncoderWeights:
    low_stack: list  # three stride-2 layers ending at the low-level map
    high_layer: ConvLayer  # one more stride-2 layer for the high-level map


def init_stub_encoder(rng, channels=(8, 16), d_low=16, d_high=32):
    c1, c2 = channels
    plan = [(1, c1), (c1, c2), (c2, d_low)]
    low = [
        ConvLayer(
            weight=linear_param(rng, KERNEL * KERNEL * cin, cout),
            bias=zeros_param(cout),
        )
        for cin, cout in plan
    ]
    high = ConvLayer(
        weight=linear_param(rng, KERNEL * KERNEL * d_low, d_high),
        bias=zeros_param(d_high),
    )
    return StubEncoderWeights(low_stack=low, high_layer=high)


@lru_cache(maxsize=64)
def _patch_indices(h, w, c):
    """Flat indices into the padded H+2 x W+2 x C volume for every output
    position's 3x3 patch."""
    hp, wp = h + 2 * PAD, w + 2 * PAD
    h_out, w_out = h // STRIDE, w // STRIDE
    oy, ox = np.meshgrid(np.arange(h_out), np.arange(w_out), indexing="ij")
    ky, kx = np.meshgrid(np.arange(KERNEL), np.arange(KERNEL), indexing="ij")
    rows = oy.reshape(-1, 1) * STRIDE + ky.reshape(1, -1)  # (h_out*w_out, 9)
    cols = ox.reshape(-1, 1) * STRIDE + kx.reshape(1, -1)
    base = (rows * wp + cols) * c  # channel-0 flat index
    idx = base[:, :, None] + np.arange(c)[None, None, :]
    return idx.reshape(h_out * w_out, KERNEL * KERNEL * c)


def conv_stride2(x, layer):
    """3x3 stride-2 same-padded convolution of an H x W x C tensor."""
    h, w, c = x.shape
    if h % STRIDE or w % STRIDE:
        raise ConfigError(f"spatial dims must be even, got {h}x{w}")
    patches = take_flat(pad_hw(x, PAD), _patch_indices(h, w, c))
    out = matmul(patches, layer.weight) + layer.bias
    return out.reshape(h // STRIDE, w // STRIDE, layer.weight.shape[1])


def image_stub_encoder(image, weights):
    """Grayscale H x W x 1 image (dims divisible by 16) to a FeaturePyramid."""
    h, w, _ = image.shape
    if h % 16 or w % 16:
        raise ConfigError(f"image dims must be divisible by 16, got {h}x{w}")
    x = image if isinstance(image, Tensor) else Tensor(image)
    for layer in weights.low_stack:
        x = gelu(conv_stride2(x, layer))
    x_low = x
    x_high = conv_stride2(x_low, weights.high_layer)
    return FeaturePyramid(x_high=x_high, x_low=x_low)
