"""Differentiable bilinear warping sampler.

The flow field stores, per output pixel, the displacement to the source
location in the input image: out(x, y) = in(x + dx, y + dy), with the
input interpolated bilinearly at the real-valued source position. Source
coordinates outside the image are clamped to the border before
interpolation, so no fill color is ever introduced.

Gradients are analytic with respect to both the image and the flow; the
flow gradient component normal to a clamped border is zero.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor


def _resolve(image_like, flow_like):
    image = image_like if isinstance(image_like, Tensor) else Tensor(image_like)
    flow = flow_like if isinstance(flow_like, Tensor) else Tensor(flow_like)
    if image.data.ndim != 4 or flow.data.ndim != 4:
        raise ShapeError(f"warp: need 4-D image and flow, got {image.data.shape} and {flow.data.shape}")
    if flow.data.shape[1] != 2:
        raise ShapeError(f"warp: flow must have exactly 2 channels, got {flow.data.shape[1]}")
    if image.data.shape[0] != flow.data.shape[0] or image.data.shape[2:] != flow.data.shape[2:]:
        raise ShapeError(f"warp: image {image.data.shape} and flow {flow.data.shape} disagree on batch/extents")
    return image, flow


def warp(image_like, flow_like) -> Tensor:
    """Sample ``image`` at the positions given by ``flow``.

    image: (B, C, H, W); flow: (B, 2, H, W) with channel 0 the horizontal
    displacement in pixels and channel 1 the vertical one.
    """
    image, flow = _resolve(image_like, flow_like)
    img = image.data
    B, C, H, W = img.shape
    dtype = img.dtype

    xs = np.arange(W, dtype=dtype)[None, None, :]
    ys = np.arange(H, dtype=dtype)[None, :, None]
    sx = xs + flow.data[:, 0]
    sy = ys + flow.data[:, 1]

    # clamping: outside coordinates read the border pixel, and their
    # normal flow derivative becomes zero
    in_x = (sx >= 0) & (sx <= W - 1)
    in_y = (sy >= 0) & (sy <= H - 1)
    cx = np.clip(sx, 0, W - 1)
    cy = np.clip(sy, 0, H - 1)

    x0 = np.floor(cx).astype(np.intp)
    y0 = np.floor(cy).astype(np.intp)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (cx - x0).astype(dtype)
    wy = (cy - y0).astype(dtype)

    bidx = np.arange(B, dtype=np.intp)[:, None, None]
    # gather the four neighbors as (B, C, H, W)
    i00 = img[bidx[:, None], np.arange(C)[None, :, None, None], y0[:, None], x0[:, None]]
    i01 = img[bidx[:, None], np.arange(C)[None, :, None, None], y0[:, None], x1[:, None]]
    i10 = img[bidx[:, None], np.arange(C)[None, :, None, None], y1[:, None], x0[:, None]]
    i11 = img[bidx[:, None], np.arange(C)[None, :, None, None], y1[:, None], x1[:, None]]

    wxe = wx[:, None]
    wye = wy[:, None]
    out_data = ((1 - wye) * ((1 - wxe) * i00 + wxe * i01)
                + wye * ((1 - wxe) * i10 + wxe * i11))

    def backward(g: np.ndarray) -> None:
        if image.requires_grad:
            gimg = np.zeros_like(img)
            flat = gimg.reshape(B * C, H * W)
            # linear indices per neighbor, shared across channels
            base = (np.arange(B * C, dtype=np.intp) * (H * W)).reshape(B, C, 1, 1)
            l00 = base + (y0 * W + x0)[:, None]
            l01 = base + (y0 * W + x1)[:, None]
            l10 = base + (y1 * W + x0)[:, None]
            l11 = base + (y1 * W + x1)[:, None]
            np.add.at(flat.reshape(-1), l00.ravel(), (g * (1 - wye) * (1 - wxe)).ravel())
            np.add.at(flat.reshape(-1), l01.ravel(), (g * (1 - wye) * wxe).ravel())
            np.add.at(flat.reshape(-1), l10.ravel(), (g * wye * (1 - wxe)).ravel())
            np.add.at(flat.reshape(-1), l11.ravel(), (g * wye * wxe).ravel())
            image._accumulate(gimg)
        if flow.requires_grad:
            dx = (1 - wye) * (i01 - i00) + wye * (i11 - i10)
            dy = (1 - wxe) * (i10 - i00) + wxe * (i11 - i01)
            gx = (g * dx).sum(axis=1) * in_x
            gy = (g * dy).sum(axis=1) * in_y
            flow._accumulate(np.stack([gx, gy], axis=1))

    return Tensor(out_data, _parents=(image, flow), _backward_fn=backward)
