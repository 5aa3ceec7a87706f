from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..exceptions import DimensionError


@dataclass(frozen=True)
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update. Returns new ``(params, state)``; inputs are untouched."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"adam: gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * (g * g)
        new_params[name] = p - state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, step=t, m=new_m, v=new_v)
