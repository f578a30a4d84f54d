"""Lightness correction: predict a per-pixel mask and blend toward white.

Warping cannot invent bright pixels in disoccluded regions (growing
eye-white, moving specular highlights), so a small conv head predicts a
mask M in (0, 1) from mid-tower activations of both scales plus the warped
image, and the output becomes O*(1-M) + M per channel: a convex blend
between the warped color and white that can only increase lightness.
"""

from __future__ import annotations

import numpy as np

from .tensor import LayerParams, ShapeError, Tensor, add, affine, batchnorm, concat_channels, conv2d_same, mul, relu, sigmoid

LCM_CHANNELS = (16, 8, 1)
LCM_KERNEL = 3


def init_lcm_tower(rng: np.random.Generator, in_channels: int, dtype) -> list[LayerParams]:
    from .model import _bn_layer, _conv_layer

    layers: list[LayerParams] = []
    prev = in_channels
    for i, c in enumerate(LCM_CHANNELS):
        layers.append(_conv_layer(rng, prev, c, LCM_KERNEL, dtype))
        if i < len(LCM_CHANNELS) - 1:
            layers.append(_bn_layer(c, dtype))
        prev = c
    return layers


def predict_mask(aux_half: Tensor, aux_full: Tensor, o_warped: Tensor,
                 layers: list[LayerParams], training: bool = False) -> Tensor:
    """Mask tower over concat[aux_half | aux_full | warped image].

    ``aux_half`` must already be upsampled to full scale. The single output
    channel is squashed through a logistic so the mask stays in (0, 1).
    """
    from .model import run_tower

    x = concat_channels([aux_half, aux_full, o_warped])
    raw, _ = run_tower(x, layers, training)
    if raw.data.shape[1] != 1:
        raise ShapeError(f"lightness mask must have 1 channel, tower produced {raw.data.shape[1]}")
    return sigmoid(raw)


def apply_lightness(o: Tensor, mask: Tensor) -> Tensor:
    """O_final = O * (1 - M) + M, the same mask for every color channel."""
    if mask.data.shape[0] != o.data.shape[0] or mask.data.shape[2:] != o.data.shape[2:]:
        raise ShapeError(f"mask {mask.data.shape} does not match image {o.data.shape}")
    return add(mul(o, affine(mask, -1.0, 1.0)), mask)
