from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

# ---- SETTINGS ----
FINAL_LR_RATIO = 0.1


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, t=0)


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    One bias-corrected Adam step; returns new dicts and leaves the inputs untouched.
    - parameters without a gradient entry get a zero gradient
    - a non-finite gradient raises before anything is updated
    """
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != params[name].shape:
            raise ValueError(f"adam_step: gradient of '{name}' has shape {g.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"adam_step: non-finite gradient for parameter '{name}'")

    t = state.t + 1
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = beta1 * state.m.get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p)) + (1.0 - beta2) * g * g
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(m=new_m, v=new_v, t=t)


def default_decay(iterations: int) -> float:
    """Per-iteration factor that takes the rate to a tenth at the last iteration."""
    if iterations <= 1:
        return 1.0
    return FINAL_LR_RATIO ** (1.0 / (iterations - 1))


def lr_schedule(iteration: int, cfg) -> float:
    """eta_t = eta_0 * decay ** t; `cfg` needs `lr`, `iterations` and `decay` (None = default)."""
    if not 0 <= iteration < cfg.iterations:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.iterations})")
    decay = cfg.decay if cfg.decay is not None else default_decay(cfg.iterations)
    return float(cfg.lr * decay ** iteration)
