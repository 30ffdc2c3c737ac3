"""ADADELTA with elementwise gradient clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParameterStore


def clip_gradients(grads: dict[str, np.ndarray], bound: float) -> dict[str, np.ndarray]:
    if bound <= 0:
        raise ValueError("clip bound must be positive")
    return {name: np.clip(g, -bound, bound) for name, g in grads.items()}


@dataclass
class AdadeltaState:
    """Running averages of squared gradients and squared updates per parameter."""

    decay: float = 0.95
    eps: float = 1e-6
    sq_grad: dict[str, np.ndarray] = field(default_factory=dict)
    sq_delta: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, store: ParameterStore, decay: float = 0.95, eps: float = 1e-6) -> "AdadeltaState":
        zeros = {name: np.zeros_like(p.data) for name, p in store.items()}
        return cls(decay, eps, zeros, {k: v.copy() for k, v in zeros.items()})

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adadelta.sq_grad/{k}": v for k, v in self.sq_grad.items()}
        out.update({f"adadelta.sq_delta/{k}": v for k, v in self.sq_delta.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], decay: float = 0.95,
                    eps: float = 1e-6) -> "AdadeltaState":
        state = cls(decay, eps)
        for key, v in arrays.items():
            kind, _, name = key.partition("/")
            if kind == "adadelta.sq_grad":
                state.sq_grad[name] = v.copy()
            elif kind == "adadelta.sq_delta":
                state.sq_delta[name] = v.copy()
        return state


def adadelta_update(store: ParameterStore, grads: dict[str, np.ndarray],
                    state: AdadeltaState) -> dict[str, np.ndarray]:
    """Apply one ADADELTA step in place; returns the applied deltas."""
    rho, eps = state.decay, state.eps
    deltas = {}
    for name, p in store.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        acc_g = state.sq_grad[name] = rho * state.sq_grad[name] + (1.0 - rho) * g * g
        delta = -np.sqrt(state.sq_delta[name] + eps) / np.sqrt(acc_g + eps) * g
        state.sq_delta[name] = rho * state.sq_delta[name] + (1.0 - rho) * delta * delta
        p.data = p.data + delta
        deltas[name] = delta
    return deltas
