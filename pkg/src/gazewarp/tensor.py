"""Dense tensors with reverse-mode automatic differentiation.

Values live in contiguous numpy arrays (BCHW layout for image-like data).
Every operation records a backward closure on a dynamic tape, so calling
``backward()`` on a scalar loss fills the ``grad`` slot of every tensor that
contributed to it. Gradients accumulate additively across fan-out.

The same kernels run in float32 (training, inference) and float64 (the
finite-difference gradient-check suites); dtype follows the input arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent with an operation."""


class Tensor:
    """N-dimensional float array with an optional gradient slot.

    Tensors are immutable once produced by an op. ``requires_grad`` marks
    leaf parameters; interior nodes inherit it from their parents so that
    backward can skip dead subgraphs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_spent")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Tensor", ...] = (),
        _backward_fn: Optional[Callable[[np.ndarray], None]] = None,
    ):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward_fn = _backward_fn
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Populates ``grad`` on every reachable tensor with ``requires_grad``.
        A graph can only be swept once; rebuild it by re-running forward.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if self._spent:
            raise RuntimeError("backward() already ran on this graph; re-run the forward pass first")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)
                node._spent = True

        self._spent = True

    # -- light operator sugar; the heavy kernels are module functions below --

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return affine(self, -1.0, 0.0)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


@dataclass
class LayerParams:
    """Parameters of one layer: a convolution, batch norm, or affine map.

    For batchnorm, ``weights`` is the per-channel scale and ``bias`` the
    per-channel shift; running statistics are carried alongside and updated
    in training mode only.
    """

    kind: str  # "conv" | "batchnorm" | "fully_connected"
    weights: Tensor
    bias: Tensor
    running_mean: Optional[Tensor] = None
    running_var: Optional[Tensor] = None
    epsilon: float = 1e-5
    momentum: float = 0.1

    def trainable(self) -> list[Tensor]:
        return [self.weights, self.bias]

    def arrays(self) -> list[Tensor]:
        """All state arrays in serialization order."""
        out = [self.weights, self.bias]
        if self.kind == "batchnorm":
            out += [self.running_mean, self.running_var]
        return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward_fn=backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward_fn=backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, _parents=(a, b), _backward_fn=backward)


def affine(x: Tensor, scale: float, shift: float) -> Tensor:
    """Elementwise scale*x + shift with python-scalar coefficients."""
    out_data = x.data * x.dtype.type(scale) + x.dtype.type(shift)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * x.dtype.type(scale))

    return Tensor(out_data, _parents=(x,), _backward_fn=backward)


def tsum(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    return Tensor(out_data, _parents=(x,), _backward_fn=backward)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    out_data = np.asarray(x.data.mean(), dtype=x.dtype)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g / n, x.data.shape).copy())

    return Tensor(out_data, _parents=(x,), _backward_fn=backward)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            # subgradient at exactly 0 is 0
            x._accumulate(g * (x.data > 0))

    return Tensor(out_data, _parents=(x,), _backward_fn=backward)


def absval(x: Tensor) -> Tensor:
    out_data = np.abs(x.data)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * np.sign(x.data))

    return Tensor(out_data, _parents=(x,), _backward_fn=backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out_data = np.empty_like(xd)
    pos = xd >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g * out_data * (1.0 - out_data))

    return Tensor(out_data, _parents=(x,), _backward_fn=backward)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate BCHW tensors along the channel axis."""
    if len(inputs) == 0:
        raise ShapeError("concat_channels needs at least one input")
    first = inputs[0].data.shape
    for t in inputs[1:]:
        s = t.data.shape
        if len(s) != 4 or s[0] != first[0] or s[2:] != first[2:]:
            raise ShapeError(f"concat_channels: batch/spatial mismatch {s} vs {first}")
    out_data = np.concatenate([t.data for t in inputs], axis=1)
    offsets = np.cumsum([0] + [t.data.shape[1] for t in inputs])

    def backward(g: np.ndarray) -> None:
        for t, lo, hi in zip(inputs, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accumulate(g[:, lo:hi])

    return Tensor(out_data, _parents=tuple(inputs), _backward_fn=backward)


def conv2d_same(x: Tensor, params: LayerParams) -> Tensor:
    """Stride-1 convolution with zero padding that preserves H and W.

    x: (B, C, H, W); weights: (O, C, kH, kW) with odd kernels; bias: (O,).
    Implemented as one GEMM per kernel offset over the zero-padded input,
    which keeps peak memory near the activation size.
    """
    if params.kind != "conv":
        raise ValueError(f"conv2d_same got params of kind {params.kind!r}")
    w, b = params.weights, params.bias
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d_same: need 4-D input and weights, got {xd.shape} and {wd.shape}")
    B, C, H, W = xd.shape
    O, Ci, kh, kw = wd.shape
    if Ci != C:
        raise ShapeError(f"conv2d_same: input has {C} channels, weights expect {Ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d_same: kernel extents must be odd, got {kh}x{kw}")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2

    xp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=xd.dtype)
    xp[:, :, ph:ph + H, pw:pw + W] = xd

    acc = np.zeros((O, B, H, W), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            acc += np.tensordot(wd[:, :, i, j], xp[:, :, i:i + H, j:j + W], axes=(1, 1))
    out_data = acc.transpose(1, 0, 2, 3) + b.data[None, :, None, None]

    def backward(g: np.ndarray) -> None:
        if b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            gw = np.empty_like(wd)
            for i in range(kh):
                for j in range(kw):
                    gw[:, :, i, j] = np.tensordot(g, xp[:, :, i:i + H, j:j + W], axes=([0, 2, 3], [0, 2, 3]))
            w._accumulate(gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + H, j:j + W] += np.tensordot(g, wd[:, :, i, j], axes=(1, 0)).transpose(0, 3, 1, 2)
            x._accumulate(gxp[:, :, ph:ph + H, pw:pw + W])

    return Tensor(out_data, _parents=(x, w, b), _backward_fn=backward)


def batchnorm(x: Tensor, params: LayerParams, training: bool) -> Tensor:
    """Per-channel batch normalization over (B, C, H, W).

    Training mode normalizes by the batch statistics and advances the
    running statistics with momentum ``m``: r <- (1-m) r + m batch.
    Inference mode is a pure function of the input and running statistics.
    """
    if params.kind != "batchnorm":
        raise ValueError(f"batchnorm got params of kind {params.kind!r}")
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"batchnorm: need 4-D input, got {xd.shape}")
    gamma, beta = params.weights, params.bias
    eps = xd.dtype.type(params.epsilon)
    axes = (0, 2, 3)
    n = xd.shape[0] * xd.shape[2] * xd.shape[3]

    if training:
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = params.momentum
        params.running_mean.data = ((1.0 - m) * params.running_mean.data + m * mean).astype(xd.dtype)
        params.running_var.data = ((1.0 - m) * params.running_var.data + m * var).astype(xd.dtype)
    else:
        mean = params.running_mean.data
        var = params.running_var.data

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            k = (gamma.data * inv_std)[None, :, None, None]
            if training:
                g_mean = g.mean(axis=axes)[None, :, None, None]
                gx_mean = (g * xhat).mean(axis=axes)[None, :, None, None]
                x._accumulate(k * (g - g_mean - xhat * gx_mean))
            else:
                x._accumulate(k * g)

    return Tensor(out_data, _parents=(x, gamma, beta), _backward_fn=backward)


def fully_connected(x: Tensor, params: LayerParams) -> Tensor:
    """Affine map (B, D) @ (D, D') + (D',)."""
    if params.kind != "fully_connected":
        raise ValueError(f"fully_connected got params of kind {params.kind!r}")
    w, b = params.weights, params.bias
    xd, wd = x.data, w.data
    if xd.ndim != 2 or wd.ndim != 2 or xd.shape[1] != wd.shape[0]:
        raise ShapeError(f"fully_connected: inner dimensions mismatch, {xd.shape} vs {wd.shape}")
    out_data = xd @ wd + b.data

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(g @ wd.T)
        if w.requires_grad:
            w._accumulate(xd.T @ g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=0))

    return Tensor(out_data, _parents=(x, w, b), _backward_fn=backward)


def _interp_rows(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Linear-interpolation matrix for 2x upsampling along one axis.

    Output position i reads the input at (i + 0.5)/2 - 0.5 (half-pixel
    centers), clamped to the valid range; clamping doubles as edge
    replication when n_out exceeds 2*n_in.
    """
    M = np.zeros((n_out, n_in), dtype=dtype)
    pos = np.clip((np.arange(n_out) + 0.5) / 2.0 - 0.5, 0.0, n_in - 1.0)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = (pos - i0).astype(dtype)
    rows = np.arange(n_out)
    np.add.at(M, (rows, i0), 1.0 - frac)
    np.add.at(M, (rows, i1), frac)
    return M


_INTERP_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    key = (n_out, n_in, np.dtype(dtype).name)
    m = _INTERP_CACHE.get(key)
    if m is None:
        m = _interp_rows(n_out, n_in, dtype)
        _INTERP_CACHE[key] = m
    return m


def upsample2x_bilinear(x: Tensor, out_hw: Optional[tuple[int, int]] = None) -> Tensor:
    """Bilinear 2x spatial upsampling of a BCHW tensor.

    ``out_hw`` defaults to (2H, 2W); odd targets one past 2H (or 2W) are
    filled by edge replication, which is what the half-pixel sampling rule
    produces under clamping.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"upsample2x_bilinear: need 4-D input, got {xd.shape}")
    B, C, H, W = xd.shape
    ho, wo = out_hw if out_hw is not None else (2 * H, 2 * W)
    My = _interp_matrix(ho, H, xd.dtype)
    Mx = _interp_matrix(wo, W, xd.dtype)
    out_data = My @ xd @ Mx.T

    def backward(g: np.ndarray) -> None:
        if x.requires_grad:
            x._accumulate(My.T @ g @ Mx)

    return Tensor(out_data, _parents=(x,), _backward_fn=backward)
