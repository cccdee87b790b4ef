"""Central-difference gradient verification for every differentiable op.

Each check contracts the op output with a fixed random tensor ``r`` so the
scalar ``<op(inputs), r>`` can be differentiated both ways.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .core import GradTape, Tensor

OP_TOL = 1e-4
MODEL_TOL = 1e-3
STEP = 1e-5
# relative error is measured against max(|analytic|, |numeric|, ABS_FLOOR):
# central differences carry ~1e-11 absolute round-off, so elements whose true
# gradient is below the floor are compared absolutely instead.
ABS_FLOOR = 1e-6


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), ABS_FLOOR)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """d f / d arr by central differences, perturbing ``arr`` in place."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    n_checked: int
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tol


def check(name: str, fn: Callable[..., Tensor], inputs: list[Tensor], rng, tol: float = OP_TOL, h: float = STEP) -> CheckResult:
    """Compare tape gradients of ``<fn(*inputs), r>`` with central differences."""
    out = fn(*inputs)
    r = rng.normal(size=out.shape)

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with GradTape() as tape:
        out = fn(*inputs)
    tape.backward(out, r)

    def scalar() -> float:
        return float(np.sum(fn(*inputs).data * r))

    worst, count = 0.0, 0
    for t in inputs:
        num = numeric_grad(scalar, t.data, h)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, float(rel_error(ana, num).max()))
        count += t.data.size
    return CheckResult(name, worst, count, tol)


def _off_kink(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_cases(rng) -> dict[str, Callable[[], CheckResult]]:
    """Named zero-argument checks, one per op configuration."""
    T = Tensor

    def conv(groups, cin, cout, k, stride, pad, hw=5):
        def run():
            x = T(rng.normal(size=(2, cin, hw, hw)))
            w = T(rng.normal(size=(cout, cin // groups, k, k)))
            b = T(rng.normal(size=cout))
            return check(
                f"conv2d[g={groups}]",
                lambda x, w, b: ops.conv2d(x, w, b, stride=stride, pad=pad, groups=groups),
                [x, w, b],
                rng,
            )

        return run

    def deconv():
        x = T(rng.normal(size=(2, 3, 3, 4)))
        w = T(rng.normal(size=(3, 2, 4, 4)))
        b = T(rng.normal(size=2))
        return check("conv2d_transposed", lambda x, w, b: ops.conv2d_transposed(x, w, b, 2, 1), [x, w, b], rng)

    def bn():
        c = 3
        x = T(rng.normal(size=(3, c, 3, 4)) * 2 + 1)
        gamma = T(rng.uniform(0.5, 1.5, size=c))
        beta = T(rng.normal(size=c))
        rm, rv = np.zeros(c), np.ones(c)
        return check("batch_norm[train]", lambda x, g, b: ops.batch_norm(x, g, b, rm, rv, True), [x, gamma, beta], rng)

    def bn_eval():
        c = 3
        x = T(rng.normal(size=(2, c, 3, 3)))
        gamma = T(rng.uniform(0.5, 1.5, size=c))
        beta = T(rng.normal(size=c))
        rm, rv = rng.normal(size=c), rng.uniform(0.5, 2, size=c)
        return check("batch_norm[eval]", lambda x, g, b: ops.batch_norm(x, g, b, rm, rv, False), [x, gamma, beta], rng)

    def shuffle():
        x = T(rng.normal(size=(2, 6, 3, 3)))
        return check("channel_shuffle", lambda x: ops.channel_shuffle(x, 3), [x], rng)

    def relu():
        x = T(_off_kink(rng, (2, 3, 4, 4)))
        return check("relu", ops.relu, [x], rng)

    def maxpool():
        # distinct, well-separated values keep every window's argmax stable under +-h
        x = T(rng.permutation(2 * 3 * 7 * 6).reshape(2, 3, 7, 6) * 0.01)
        return check("max_pool2d", lambda x: ops.max_pool2d(x, 3, 2, 1), [x], rng)

    def avgpool():
        x = T(rng.normal(size=(2, 3, 6, 6)))
        return check("avg_pool2d", lambda x: ops.avg_pool2d(x, 3, 2, 1), [x], rng)

    def cat():
        a = T(rng.normal(size=(2, 2, 3, 3)))
        b = T(rng.normal(size=(2, 3, 3, 3)))
        return check("concat", lambda a, b: ops.concat([a, b]), [a, b], rng)

    def addop():
        a = T(rng.normal(size=(2, 2, 3, 3)))
        b = T(rng.normal(size=(2, 2, 3, 3)))
        return check("add", ops.add, [a, b], rng)

    def wce():
        logits = T(rng.normal(size=(2, 2, 4, 5)))
        target = rng.integers(0, 2, size=(2, 4, 5))
        return check(
            "weighted_cross_entropy",
            lambda z: ops.weighted_cross_entropy(z, target, (1.0, 3.0)),
            [logits],
            rng,
        )

    return {
        "conv2d[g=1]": conv(1, 4, 6, 3, 1, 1),
        "conv2d[g=2]": conv(2, 4, 4, 1, 1, 0),
        "conv2d[g=2,k3,s2]": conv(2, 4, 6, 3, 2, 1),
        "conv2d[depthwise]": conv(4, 4, 4, 3, 2, 1),
        "conv2d_transposed": deconv,
        "batch_norm[train]": bn,
        "batch_norm[eval]": bn_eval,
        "channel_shuffle": shuffle,
        "relu": relu,
        "max_pool2d": maxpool,
        "avg_pool2d": avgpool,
        "concat": cat,
        "add": addop,
        "weighted_cross_entropy": wce,
    }


def run_op_checks(names: list[str] | None = None, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    cases = op_cases(rng)
    unknown = set(names or []) - set(cases)
    if unknown:
        raise KeyError(f"unknown op(s): {', '.join(sorted(unknown))}")
    results = []
    for key, run in cases.items():
        if names and key not in names:
            continue
        res = run()
        res.name = key
        results.append(res)
    return results
