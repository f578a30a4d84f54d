"""Input encoding: the 33-channel map stack fed to the warping towers.

The stack is [RGB (3) | angle embedding (16) | anchor offset maps (14)].
The correction angle goes through a small learned MLP whose 16-dimensional
output is replicated over all spatial positions; the 7 anchor points
contribute two signed-offset maps each. A half-scale stack is built by the
same procedure with floor-halved extents and halved anchor coordinates.
"""

from __future__ import annotations

import logging

import numpy as np

from .tensor import LayerParams, ShapeError, Tensor, fully_connected, relu

log = logging.getLogger(__name__)

EMBED_DIM = 16
NUM_ANCHORS = 7
STACK_CHANNELS = 3 + EMBED_DIM + 2 * NUM_ANCHORS
ANGLE_LIMIT_DEG = 30.0
# raw degrees are poorly scaled for a small MLP; map the trained range to [-1, 1]
ANGLE_SCALE = 1.0 / ANGLE_LIMIT_DEG


def embed_angle(angle_deg, mlp: list[LayerParams]) -> Tensor:
    """Map correction angles (B, dims) in degrees to (B, 16) embeddings.

    Two FC+ReLU layers, trained by backpropagation together with the rest
    of the network. Angles beyond the trained range only log a warning;
    extrapolation is permitted but degrades. ``angle_deg`` may be a Tensor
    when the caller wants gradients with respect to the angle itself.
    """
    from .tensor import affine

    if isinstance(angle_deg, Tensor):
        a = angle_deg
    else:
        arr = np.atleast_2d(np.asarray(angle_deg, dtype=np.float64))
        a = Tensor(arr.astype(mlp[0].weights.dtype))
    if np.any(np.abs(a.data) > ANGLE_LIMIT_DEG):
        log.warning("correction angle outside the trained +/-%g degree range: max |angle| = %.1f",
                    ANGLE_LIMIT_DEG, float(np.abs(a.data).max()))
    if a.data.shape[1] != mlp[0].weights.shape[0]:
        raise ShapeError(f"embed_angle: got {a.data.shape[1]} angle dims, MLP expects {mlp[0].weights.shape[0]}")
    h = affine(a, ANGLE_SCALE, 0.0)
    h = relu(fully_connected(h, mlp[0]))
    h = relu(fully_connected(h, mlp[1]))
    return h


def broadcast_embedding(vec: Tensor, h: int, w: int) -> Tensor:
    """Replicate a (B, D) vector into (B, D, h, w) constant maps."""
    vd = vec.data
    out_data = np.broadcast_to(vd[:, :, None, None], (*vd.shape, h, w)).copy()

    def backward(g: np.ndarray) -> None:
        if vec.requires_grad:
            vec._accumulate(g.sum(axis=(2, 3)))

    return Tensor(out_data, _parents=(vec,), _backward_fn=backward)


def anchor_maps(anchors: np.ndarray, h: int, w: int, dtype=np.float32) -> np.ndarray:
    """Signed pixel offsets from every grid cell to each anchor point.

    anchors: (B, 7, 2) as (x, y) in crop pixel coordinates. Returns
    (B, 14, h, w) with channels ordered [dx_0, dy_0, dx_1, dy_1, ...],
    where dx_i[y, x] = x - anchor_x_i. Not learnable.
    """
    a = np.asarray(anchors, dtype=dtype)
    if a.ndim == 2:
        a = a[None]
    if a.shape[1:] != (NUM_ANCHORS, 2):
        raise ShapeError(f"anchor_maps: anchors must be (B, {NUM_ANCHORS}, 2), got {a.shape}")
    B = a.shape[0]
    xs = np.arange(w, dtype=dtype)[None, None, None, :]
    ys = np.arange(h, dtype=dtype)[None, None, :, None]
    dx = xs - a[:, :, 0, None, None]            # (B, 7, h, w)
    dy = ys - a[:, :, 1, None, None]
    out = np.empty((B, 2 * NUM_ANCHORS, h, w), dtype=dtype)
    out[:, 0::2] = dx
    out[:, 1::2] = dy
    return out


def build_input_stack(image: Tensor, anchors: np.ndarray, embedding: Tensor) -> Tensor:
    """Assemble the (B, 33, H, W) input stack.

    Channel order is fixed: image RGB first, then the 16 replicated
    embedding maps, then the 14 anchor offset maps.
    """
    from .tensor import concat_channels

    if image.data.ndim != 4 or image.data.shape[1] != 3:
        raise ShapeError(f"build_input_stack: image must be (B, 3, H, W), got {image.data.shape}")
    B, _, h, w = image.data.shape
    emb_maps = broadcast_embedding(embedding, h, w)
    anc = Tensor(anchor_maps(anchors, h, w, dtype=image.dtype))
    return concat_channels([image, emb_maps, anc])


def downscale_half(image: Tensor) -> Tensor:
    """Average 2x2 blocks; extents floor-halve (odd trailing row/col dropped).

    The image input carries no gradient in training, so this is recorded as
    a plain averaging op.
    """
    xd = image.data
    B, C, H, W = xd.shape
    h2, w2 = H // 2, W // 2
    v = xd[:, :, :2 * h2, :2 * w2]
    out_data = 0.25 * (v[:, :, 0::2, 0::2] + v[:, :, 1::2, 0::2] + v[:, :, 0::2, 1::2] + v[:, :, 1::2, 1::2])

    def backward(g: np.ndarray) -> None:
        if image.requires_grad:
            gx = np.zeros_like(xd)
            q = 0.25 * g
            gx[:, :, 0:2 * h2:2, 0:2 * w2:2] += q
            gx[:, :, 1:2 * h2:2, 0:2 * w2:2] += q
            gx[:, :, 0:2 * h2:2, 1:2 * w2:2] += q
            gx[:, :, 1:2 * h2:2, 1:2 * w2:2] += q
            image._accumulate(gx)

    return Tensor(out_data, _parents=(image,), _backward_fn=backward)


def build_half_scale_stack(image: Tensor, anchors: np.ndarray, embedding: Tensor) -> Tensor:
    """The same 33-map stack at floor(H/2) x floor(W/2), anchors halved."""
    half = downscale_half(image)
    return build_input_stack(half, np.asarray(anchors) / 2.0, embedding)
