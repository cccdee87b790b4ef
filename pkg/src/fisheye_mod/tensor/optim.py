"""Adam with classic (gradient-additive) L2 regularisation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update, applied to ``params`` in place.

    The L2 term ``weight_decay * theta`` is added to the gradient before the
    moment updates. Parameters missing from ``grads`` are treated as having a
    zero loss gradient (they still feel the decay).
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        elif g.shape != theta.shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * theta
        m = state.m.setdefault(name, np.zeros_like(theta))
        v = state.v.setdefault(name, np.zeros_like(theta))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        theta -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
