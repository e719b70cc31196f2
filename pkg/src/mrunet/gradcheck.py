"""Central finite-difference verification of autodiff gradients.

Every case builds a scalar objective from 64-bit inputs, computes the
autodiff gradient once, then compares it per element against the central
difference (f(x+h) - f(x-h)) / 2h. The relative error uses a unit floor in
the denominator so near-zero gradients are compared absolutely.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .tensor import (
    backward,
    concat_channels,
    constant,
    mul,
    parameter,
    scale,
    sub,
    total_sum,
)

FD_STEP = 1e-5
SMOOTH_TOL = 1e-6
NONSMOOTH_TOL = 1e-4  # ops with kinks, sampled away from them


@dataclass
class GradCase:
    """One gradient check: named 64-bit inputs and a scalar objective."""

    name: str
    tolerance: float
    build: Callable[[np.random.Generator], tuple[dict[str, np.ndarray], Callable]]


@dataclass
class CaseResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _rel_err(ad: float, fd: float) -> float:
    return abs(ad - fd) / max(1.0, abs(ad), abs(fd))


def _eval(fn, arrays: dict[str, np.ndarray]) -> float:
    nodes = {k: constant(v) for k, v in arrays.items()}
    return float(fn(nodes).data[0])


def run_case(case: GradCase, seed: int = 0, max_coords: int | None = None) -> CaseResult:
    """Compare autodiff against central differences for one case.

    When max_coords is given, only that many randomly chosen coordinates
    per input are differenced (used for whole-model checks where a full
    sweep would be too slow).
    """
    rng = np.random.default_rng(seed)
    arrays, fn = case.build(rng)
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
    nodes = {k: parameter(v.copy()) for k, v in arrays.items()}
    out = fn(nodes)
    grad_map = backward(out)
    worst = 0.0
    for key, base in arrays.items():
        ad = grad_map.get(nodes[key])
        if ad is None:
            ad = np.zeros_like(base)
        flat = base.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
            coords.sort()
        for i in coords:
            perturbed = dict(arrays)
            bumped = base.copy().reshape(-1)
            bumped[i] += FD_STEP
            perturbed[key] = bumped.reshape(base.shape)
            f_plus = _eval(fn, perturbed)
            bumped[i] -= 2 * FD_STEP
            perturbed[key] = bumped.reshape(base.shape)
            f_minus = _eval(fn, perturbed)
            fd = (f_plus - f_minus) / (2 * FD_STEP)
            worst = max(worst, _rel_err(float(ad.reshape(-1)[i]), fd))
    return CaseResult(case.name, worst, case.tolerance)


def _case_add(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    r = rng.standard_normal((3, 4))

    def fn(n):
        from .tensor import add
        return total_sum(mul(add(n["a"], n["b"]), constant(r)))

    return {"a": a, "b": b}, fn


def _case_sub(rng):
    a, b = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
    r = rng.standard_normal((2, 5))

    def fn(n):
        return total_sum(mul(sub(n["a"], n["b"]), constant(r)))

    return {"a": a, "b": b}, fn


def _case_mul(rng):
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))

    def fn(n):
        return total_sum(mul(n["a"], n["b"]))

    return {"a": a, "b": b}, fn


def _case_concat(rng):
    a, b = rng.standard_normal((2, 3, 2)), rng.standard_normal((2, 3, 3))
    r = rng.standard_normal((2, 3, 5))

    def fn(n):
        return total_sum(mul(concat_channels(n["a"], n["b"]), constant(r)))

    return {"a": a, "b": b}, fn


def _case_scale(rng):
    a = rng.standard_normal((6,))

    def fn(n):
        return scale(total_sum(mul(n["a"], n["a"])), 0.37)

    return {"a": a}, fn


def _case_composite(rng):
    a, b = rng.standard_normal((2, 2, 2)), rng.standard_normal((2, 2, 2))
    r = rng.standard_normal((2, 2, 4))

    def fn(n):
        from .tensor import add
        s = mul(add(n["a"], n["b"]), sub(n["a"], n["b"]))
        cat = concat_channels(s, mul(n["a"], n["b"]))
        return total_sum(mul(cat, constant(r)))

    return {"a": a, "b": b}, fn


def _case_conv2d(rng):
    x = rng.standard_normal((1, 5, 5, 2))
    k = rng.standard_normal((3, 3, 2, 4)) * 0.5
    bias = rng.standard_normal(4) * 0.1
    r = rng.standard_normal((1, 5, 5, 4))

    def fn(n):
        p = ops.ConvParams(kernel=n["k"], bias=n["bias"], stride=1, padding="same")
        return total_sum(mul(ops.conv2d(n["x"], p), constant(r)))

    return {"x": x, "k": k, "bias": bias}, fn


def _case_conv2d_strided(rng):
    x = rng.standard_normal((2, 6, 6, 3))
    k = rng.standard_normal((2, 2, 3, 2)) * 0.5
    bias = rng.standard_normal(2) * 0.1
    r = rng.standard_normal((2, 3, 3, 2))

    def fn(n):
        p = ops.ConvParams(kernel=n["k"], bias=n["bias"], stride=2, padding="valid")
        return total_sum(mul(ops.conv2d(n["x"], p), constant(r)))

    return {"x": x, "k": k, "bias": bias}, fn


def _case_conv_transpose(rng):
    x = rng.standard_normal((2, 3, 3, 3))
    k = rng.standard_normal((2, 2, 3, 2)) * 0.5
    bias = rng.standard_normal(2) * 0.1
    r = rng.standard_normal((2, 6, 6, 2))

    def fn(n):
        p = ops.ConvParams(kernel=n["k"], bias=n["bias"], stride=2, padding="valid")
        return total_sum(mul(ops.conv_transpose2d(n["x"], p), constant(r)))

    return {"x": x, "k": k, "bias": bias}, fn


def _case_maxpool(rng):
    # Windows get well-separated values so no tie sits within the FD step.
    base = rng.permutation(2 * 4 * 4 * 2).astype(np.float64).reshape(2, 4, 4, 2)
    x = base * 0.1 + rng.uniform(-0.001, 0.001, size=base.shape)
    r = rng.standard_normal((2, 2, 2, 2))

    def fn(n):
        return total_sum(mul(ops.maxpool2d(n["x"]), constant(r)))

    return {"x": x}, fn


def _case_batchnorm_training(rng):
    x = rng.standard_normal((2, 3, 3, 2))
    gamma = rng.uniform(0.5, 1.5, size=2)
    beta = rng.standard_normal(2) * 0.3
    r = rng.standard_normal((2, 3, 3, 2))

    def fn(n):
        p = ops.BatchNormParams(gamma=n["gamma"], beta=n["beta"],
                                running_mean=np.zeros(2), running_var=np.ones(2))
        return total_sum(mul(ops.batchnorm(n["x"], p, "training"), constant(r)))

    return {"x": x, "gamma": gamma, "beta": beta}, fn


def _case_batchnorm_inference(rng):
    x = rng.standard_normal((2, 3, 3, 2))
    gamma = rng.uniform(0.5, 1.5, size=2)
    beta = rng.standard_normal(2) * 0.3
    rm = rng.standard_normal(2) * 0.2
    rv = rng.uniform(0.5, 1.5, size=2)
    r = rng.standard_normal((2, 3, 3, 2))

    def fn(n):
        p = ops.BatchNormParams(gamma=n["gamma"], beta=n["beta"],
                                running_mean=rm.copy(), running_var=rv.copy())
        return total_sum(mul(ops.batchnorm(n["x"], p, "inference"), constant(r)))

    return {"x": x, "gamma": gamma, "beta": beta}, fn


def _case_relu(rng):
    # Sampled away from the kink at zero.
    x = rng.uniform(0.2, 1.5, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
    r = rng.standard_normal((3, 4))

    def fn(n):
        return total_sum(mul(ops.relu(n["x"]), constant(r)))

    return {"x": x}, fn


def _case_sigmoid(rng):
    x = rng.standard_normal((3, 4)) * 2.0
    r = rng.standard_normal((3, 4))

    def fn(n):
        return total_sum(mul(ops.sigmoid(n["x"]), constant(r)))

    return {"x": x}, fn


def _case_bce(rng):
    from .train import bce_sum_node
    target = (rng.random((2, 4, 4, 1)) > 0.5).astype(np.float64)
    logits = rng.standard_normal((2, 4, 4, 1))

    def fn(n):
        return scale(bce_sum_node(ops.sigmoid(n["logits"]), target), 0.5)

    return {"logits": logits}, fn


def default_cases() -> list[GradCase]:
    return [
        GradCase("add", SMOOTH_TOL, _case_add),
        GradCase("sub", SMOOTH_TOL, _case_sub),
        GradCase("mul", SMOOTH_TOL, _case_mul),
        GradCase("concat_channels", SMOOTH_TOL, _case_concat),
        GradCase("scale", SMOOTH_TOL, _case_scale),
        GradCase("composite", SMOOTH_TOL, _case_composite),
        GradCase("conv2d", SMOOTH_TOL, _case_conv2d),
        GradCase("conv2d_strided", SMOOTH_TOL, _case_conv2d_strided),
        GradCase("conv_transpose2d", SMOOTH_TOL, _case_conv_transpose),
        GradCase("maxpool2d", NONSMOOTH_TOL, _case_maxpool),
        GradCase("batchnorm_training", SMOOTH_TOL, _case_batchnorm_training),
        GradCase("batchnorm_inference", SMOOTH_TOL, _case_batchnorm_inference),
        GradCase("relu", NONSMOOTH_TOL, _case_relu),
        GradCase("sigmoid", SMOOTH_TOL, _case_sigmoid),
        GradCase("bce", SMOOTH_TOL, _case_bce),
    ]


def check_model_gradients(u_base: int = 8, extents=(16, 16), in_channels: int = 3,
                          seed: int = 0, coords_per_tensor: int = 4,
                          step: float = 1e-6) -> CaseResult:
    """Whole-model check: a tiny 64-bit network, training-mode forward into
    the loss, finite-differenced at sampled coordinates of every parameter.

    The full network contains ReLU and max-pooling kinks that cannot be
    sampled around, so the case carries the relaxed tolerance and uses a
    smaller step than the per-op suite: shift parameters move every
    activation at once, and a wide difference interval would sweep some
    activation across a kink almost surely.
    """
    from .model import build_multiresunet
    from .train import bce_sum_node

    rng = np.random.default_rng(seed)
    model = build_multiresunet(2, extents, in_channels, u_base=u_base,
                               precision="check", seed=seed)
    # Batch of two: the deepest level is 1x1 spatial, so a single image
    # would leave batch statistics undefined there.
    x = constant(rng.standard_normal((2, *extents, in_channels)))
    target = (rng.random((2, *extents, 1)) > 0.5).astype(np.float64)

    def objective() -> float:
        pred = model.apply(x, "training")
        return float(bce_sum_node(pred, target).data[0])

    params = dict(model.trainable_parameters())
    for node in params.values():
        node.grad = None
    pred = model.apply(x, "training")
    backward(bce_sum_node(pred, target))
    ad = {name: (node.grad.copy() if node.grad is not None else
                 np.zeros_like(node.value.data))
          for name, node in params.items()}

    worst = 0.0
    for name, node in params.items():
        flat = node.value.data.reshape(-1)
        k = min(coords_per_tensor, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = objective()
            flat[i] = orig - step
            f_minus = objective()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * step)
            worst = max(worst, _rel_err(float(ad[name].reshape(-1)[i]), fd))
    return CaseResult("multiresunet_tiny", worst, NONSMOOTH_TOL)


def run_suite(cases=None, seed: int = 0, max_coords: int | None = None) -> list[CaseResult]:
    results = []
    for case in cases or default_cases():
        results.append(run_case(case, seed=seed, max_coords=max_coords))
    return results
