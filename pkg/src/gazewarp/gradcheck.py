"""Finite-difference verification of every analytic gradient in the engine.

Each check builds a small random double-precision problem, runs the real
forward/backward code paths, and compares against central differences.
Op-level checks use h = 1e-3 with inputs kept away from the piecewise
boundaries (ReLU zeros, bilinear integer lattice). The composite
whole-model check uses h = 1e-5: a deep ReLU network almost surely has
some pre-activation within 1e-3 of a kink, which would pollute the
difference quotient even though the analytic gradient is exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import lcm as lcm_mod
from . import model as model_mod
from . import sampler, training
from .tensor import LayerParams, Tensor
from . import tensor as T

OP_TOL = 1e-4
GRAPH_TOL = 1e-3
OP_H = 1e-3
GRAPH_H = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<28s} max rel err {self.max_rel_error:.3e}  (tol {self.tolerance:.0e})  {status}"


def central_difference(loss_fn: Callable[[], float], param: np.ndarray, h: float,
                       indices=None) -> np.ndarray:
    """Central-difference gradient of a scalar loss w.r.t. ``param`` entries.

    Mutates and restores ``param`` in place; ``indices`` restricts the
    sweep to a subset of flat positions (full sweep when None).
    """
    flat = param.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    grad = np.zeros(param.shape, dtype=np.float64).reshape(-1)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        lp = loss_fn()
        flat[i] = orig - h
        lm = loss_fn()
        flat[i] = orig
        grad[i] = (lp - lm) / (2.0 * h)
    return grad.reshape(param.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest deviation normalized by the overall gradient scale."""
    scale = max(float(np.abs(analytic).max(initial=0.0)),
                float(np.abs(numeric).max(initial=0.0)), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_op(name: str, loss_fn: Callable[[], Tensor], params: list[Tensor],
             h: float = OP_H, tol: float = OP_TOL, indices=None) -> CheckResult:
    """Compare backward() against finite differences for every parameter."""
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = central_difference(lambda: loss_fn().item(), p.data, h, indices=indices)
        worst = max(worst, max_relative_error(analytic, numeric))
    return CheckResult(name, worst, tol)


def _safe_flow(rng, shape, lo=-2.0, hi=2.0):
    """Random flow whose fractional parts stay in [0.15, 0.85]."""
    f = rng.uniform(lo, hi, shape)
    return np.sign(f) * (np.floor(np.abs(f)) + rng.uniform(0.15, 0.85, shape))


def _mse_vs(target: np.ndarray):
    tt = Tensor(target)

    def loss_of(out: Tensor) -> Tensor:
        d = T.sub(out, tt)
        return T.tmean(T.mul(d, d))

    return loss_of


def check_conv2d() -> CheckResult:
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((2, 3, 5, 6)), requires_grad=True)
    p = LayerParams("conv", Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.4, requires_grad=True),
                    Tensor(rng.standard_normal(4) * 0.1, requires_grad=True))
    loss = _mse_vs(rng.standard_normal((2, 4, 5, 6)))
    return check_op("conv2d_same", lambda: loss(T.conv2d_same(x, p)), [x, p.weights, p.bias])


def check_batchnorm_training() -> CheckResult:
    rng = np.random.default_rng(12)
    x = Tensor(rng.standard_normal((4, 3, 4, 5)), requires_grad=True)
    p = LayerParams("batchnorm", Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True),
                    Tensor(rng.standard_normal(3) * 0.2, requires_grad=True),
                    running_mean=Tensor(np.zeros(3, dtype=np.float64)),
                    running_var=Tensor(np.ones(3, dtype=np.float64)))
    loss = _mse_vs(rng.standard_normal((4, 3, 4, 5)))
    return check_op("batchnorm (training)", lambda: loss(T.batchnorm(x, p, True)), [x, p.weights, p.bias])


def check_batchnorm_inference() -> CheckResult:
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((2, 3, 4, 5)), requires_grad=True)
    p = LayerParams("batchnorm", Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True),
                    Tensor(rng.standard_normal(3) * 0.2, requires_grad=True),
                    running_mean=Tensor(rng.standard_normal(3) * 0.3),
                    running_var=Tensor(rng.uniform(0.5, 2.0, 3)))
    loss = _mse_vs(rng.standard_normal((2, 3, 4, 5)))
    return check_op("batchnorm (inference)", lambda: loss(T.batchnorm(x, p, False)), [x, p.weights, p.bias])


def check_fully_connected() -> CheckResult:
    rng = np.random.default_rng(14)
    x = Tensor(rng.standard_normal((3, 5)), requires_grad=True)
    p = LayerParams("fully_connected", Tensor(rng.standard_normal((5, 7)) * 0.5, requires_grad=True),
                    Tensor(rng.standard_normal(7) * 0.1, requires_grad=True))
    loss = _mse_vs(rng.standard_normal((3, 7)))
    return check_op("fully_connected", lambda: loss(T.fully_connected(x, p)), [x, p.weights, p.bias])


def check_relu() -> CheckResult:
    rng = np.random.default_rng(15)
    vals = rng.standard_normal((3, 4, 5))
    vals = np.where(np.abs(vals) < 0.1, 0.3, vals)  # stay away from the kink
    x = Tensor(vals, requires_grad=True)
    loss = _mse_vs(rng.standard_normal((3, 4, 5)))
    return check_op("relu", lambda: loss(T.relu(x)), [x])


def check_upsample() -> CheckResult:
    rng = np.random.default_rng(16)
    x = Tensor(rng.standard_normal((2, 3, 4, 5)), requires_grad=True)
    loss = _mse_vs(rng.standard_normal((2, 3, 9, 11)))
    return check_op("upsample2x (odd target)", lambda: loss(T.upsample2x_bilinear(x, (9, 11))), [x])


def check_concat() -> CheckResult:
    rng = np.random.default_rng(17)
    a = Tensor(rng.standard_normal((2, 2, 3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3, 3, 4)), requires_grad=True)
    loss = _mse_vs(rng.standard_normal((2, 5, 3, 4)))
    return check_op("concat_channels", lambda: loss(T.concat_channels([a, b])), [a, b])


def check_sampler() -> CheckResult:
    rng = np.random.default_rng(18)
    img = Tensor(rng.uniform(0, 1, (2, 3, 6, 7)), requires_grad=True)
    flow = Tensor(_safe_flow(rng, (2, 2, 6, 7)), requires_grad=True)
    loss = _mse_vs(rng.uniform(0, 1, (2, 3, 6, 7)))
    return check_op("sampler.warp", lambda: loss(sampler.warp(img, flow)), [img, flow])


def check_angle_embedding() -> CheckResult:
    rng = np.random.default_rng(19)
    from . import encoding

    mlp = [
        LayerParams("fully_connected", Tensor(rng.standard_normal((1, 16)) * 0.5, requires_grad=True),
                    Tensor(rng.standard_normal(16) * 0.3, requires_grad=True)),
        LayerParams("fully_connected", Tensor(rng.standard_normal((16, 16)) * 0.3, requires_grad=True),
                    Tensor(rng.standard_normal(16) * 0.3, requires_grad=True)),
    ]
    angle = Tensor(rng.uniform(-25, 25, (3, 1)), requires_grad=True)
    loss = _mse_vs(rng.standard_normal((3, 16)))
    params = [angle] + [t for lp in mlp for t in lp.trainable()]
    return check_op("angle embedding", lambda: loss(encoding.embed_angle(angle, mlp)), params)


def check_lcm_blend() -> CheckResult:
    rng = np.random.default_rng(20)
    o = Tensor(rng.uniform(0, 1, (2, 3, 4, 5)), requires_grad=True)
    m = Tensor(rng.uniform(0.05, 0.95, (2, 1, 4, 5)), requires_grad=True)
    loss = _mse_vs(rng.uniform(0, 1, (2, 3, 4, 5)))
    return check_op("lightness blend", lambda: loss(lcm_mod.apply_lightness(o, m)), [o, m])


def check_lcm_mask() -> CheckResult:
    rng = np.random.default_rng(21)
    layers = lcm_mod.init_lcm_tower(rng, 2 * 4 + 3, np.float64)
    aux_h = Tensor(rng.standard_normal((1, 4, 5, 6)), requires_grad=True)
    aux_f = Tensor(rng.standard_normal((1, 4, 5, 6)), requires_grad=True)
    o = Tensor(rng.uniform(0, 1, (1, 3, 5, 6)), requires_grad=True)
    loss = _mse_vs(rng.uniform(0, 1, (1, 1, 5, 6)))
    params = [aux_h, aux_f, o] + [t for lp in layers for t in lp.trainable()]
    return check_op("lightness mask tower",
                    lambda: loss(lcm_mod.predict_mask(aux_h, aux_f, o, layers, training=True)),
                    params)


def check_upsample_flow() -> CheckResult:
    rng = np.random.default_rng(22)
    f = Tensor(_safe_flow(rng, (1, 2, 4, 5)), requires_grad=True)
    loss = _mse_vs(rng.standard_normal((1, 2, 9, 11)))
    return check_op("upsample_flow", lambda: loss(model_mod.upsample_flow(f, (9, 11))), [f])


def check_loss_l2() -> CheckResult:
    rng = np.random.default_rng(23)
    o = Tensor(rng.uniform(0, 1, (1, 3, 5, 6)), requires_grad=True)
    gt = rng.uniform(0, 1, (1, 3, 5, 6))
    return check_op("loss_l2", lambda: training.loss_l2(o, gt), [o])


def check_loss_registration() -> CheckResult:
    rng = np.random.default_rng(24)
    k = 2
    o = Tensor(rng.uniform(0, 1, (1, 3, 5, 6)), requires_grad=True)
    gt_big = rng.uniform(0, 1, (1, 3, 5 + 2 * k, 6 + 2 * k))
    res = []
    for dist in ("l2", "l1"):
        res.append(check_op(f"loss_registration ({dist})",
                            lambda d=dist: training.loss_registration(o, gt_big, dist=d, k=k), [o]))
    worst = max(res, key=lambda r: r.max_rel_error)
    return CheckResult("loss_registration", worst.max_rel_error, worst.tolerance)


def check_full_graph() -> CheckResult:
    """End-to-end CFW_LCM gradient on a 9x11 toy input, 16 random weights."""
    rng = np.random.default_rng(25)
    cfg = model_mod.ModelConfig(variant="CFW_LCM", channels_per_layer=4, input_size=(9, 11))
    weights = model_mod.init_weights(cfg, seed=3, dtype=np.float64)
    # keep predicted flows away from the integer lattice
    weights.coarse[-1].bias.data = np.array([0.3, -0.4])
    weights.fine[-1].bias.data = np.array([0.25, 0.35])

    img = rng.uniform(0, 1, (1, 3, 9, 11))
    anchors = rng.uniform(2.0, 8.0, (1, 7, 2))
    angle = np.array([[12.0]])
    gt = rng.uniform(0, 1, (1, 3, 9, 11))

    def loss_fn() -> Tensor:
        res = model_mod.forward(img, anchors, angle, weights, training=True)
        return training.loss_l2(res.output, gt)

    params = weights.trainable()
    sizes = np.array([p.size for p in params])
    flat_ids = rng.choice(int(sizes.sum()), size=16, replace=False)

    for p in params:
        p.zero_grad()
    loss_fn().backward()

    worst = 0.0
    bounds = np.cumsum(sizes)
    for fid in flat_ids:
        pi = int(np.searchsorted(bounds, fid, side="right"))
        local = int(fid - (bounds[pi - 1] if pi else 0))
        p = params[pi]
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)[local]
        numeric = central_difference(lambda: loss_fn().item(), p.data, GRAPH_H, indices=[local]).reshape(-1)[local]
        worst = max(worst, max_relative_error(np.asarray(analytic), np.asarray(numeric)))
    return CheckResult("full CFW_LCM graph", worst, GRAPH_TOL)


ALL_CHECKS: list[Callable[[], CheckResult]] = [
    check_conv2d,
    check_batchnorm_training,
    check_batchnorm_inference,
    check_fully_connected,
    check_relu,
    check_upsample,
    check_concat,
    check_sampler,
    check_angle_embedding,
    check_lcm_blend,
    check_lcm_mask,
    check_upsample_flow,
    check_loss_l2,
    check_loss_registration,
    check_full_graph,
]


def run_all() -> list[CheckResult]:
    return [fn() for fn in ALL_CHECKS]
