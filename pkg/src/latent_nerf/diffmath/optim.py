"""Adam optimizer with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import UsageError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param, beta1=0.9, beta2=0.999, eps=1e-8):
        data = param if isinstance(param, np.ndarray) else param.data
        return cls(np.zeros_like(data), np.zeros_like(data), 0, beta1, beta2, eps)


def adam_step(param, state, lr):
    """Apply one bias-corrected Adam update to ``param`` in place.

    Entries whose gradient is exactly zero keep their value and moments
    (lazy update), so a zero gradient never moves a parameter. The step
    counter always advances.

    Raises:
        UsageError: if ``param.grad`` is missing.
    """
    if param.grad is None:
        raise UsageError(f"parameter {param.name or '<unnamed>'} has no gradient")
    g = param.grad
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    active = g != 0
    m_new = b1 * state.m + (1 - b1) * g
    v_new = b2 * state.v + (1 - b2) * g * g
    m_hat = m_new / (1 - b1 ** state.t)
    v_hat = v_new / (1 - b2 ** state.t)
    delta = lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if active.all():
        state.m, state.v = m_new.astype(state.m.dtype), v_new.astype(state.v.dtype)
        param.data -= delta.astype(param.data.dtype)
    else:
        state.m = np.where(active, m_new, state.m).astype(state.m.dtype)
        state.v = np.where(active, v_new, state.v).astype(state.v.dtype)
        param.data -= np.where(active, delta, 0).astype(param.data.dtype)
    return param, state


@dataclass
class Adam:
    """Adam over a named parameter dict; parameters without gradients are skipped."""

    params: dict
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            if name not in self.states:
                self.states[name] = AdamState.zeros_like(p, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            if p.grad is not None:
                adam_step(p, self.states[name], self.lr)

    def state_arrays(self, prefix):
        out = {}
        for name, st in self.states.items():
            out[f"{prefix}/{name}/m"] = st.m
            out[f"{prefix}/{name}/v"] = st.v
        return out

    def state_meta(self):
        return {
            "lr": self.lr,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "t": {name: st.t for name, st in self.states.items()},
        }

    def load_state(self, prefix, arrays, meta):
        self.lr = meta["lr"]
        for name, st in self.states.items():
            st.m = arrays[f"{prefix}/{name}/m"].copy()
            st.v = arrays[f"{prefix}/{name}/v"].copy()
            st.t = int(meta["t"][name])
