"""Adam with bias correction and per-parameter moment state."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..errors import ConsistencyError, NumericError
from .autograd import Tensor


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param: np.ndarray, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0, beta1, beta2, eps)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    lr: float,
    states: dict[str, AdamState],
) -> None:
    """Apply one Adam update in place to every tensor in ``params``.

    Missing states are created on first use; a missing gradient is an error
    because silently skipping a parameter would desynchronise its step count.
    """
    for name in params:
        if name not in grads:
            raise ConsistencyError(f"no gradient supplied for parameter {name!r}")
    for name, param in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != param.shape:
            raise ConsistencyError(f"gradient for {name!r} has shape {g.shape}, parameter {param.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r}")
        st = states.get(name)
        if st is None:
            st = states[name] = AdamState.zeros_like(param.data)
        st.t += 1
        st.m *= st.beta1
        st.m += (1.0 - st.beta1) * g
        st.v *= st.beta2
        st.v += (1.0 - st.beta2) * (g * g)
        m_hat = st.m / (1.0 - st.beta1 ** st.t)
        v_hat = st.v / (1.0 - st.beta2 ** st.t)
        param.data -= lr * m_hat / (np.sqrt(v_hat) + st.eps)


class Adam:
    """Stateful wrapper around :func:`adam_step`.

    The step size is passed per call so one optimizer can drive parameter
    groups with different learning rates.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.states: dict[str, AdamState] = {}

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float) -> None:
        for name, p in params.items():
            if name not in self.states:
                self.states[name] = AdamState.zeros_like(p.data, self.beta1, self.beta2, self.eps)
        adam_step(params, grads, lr, self.states)

    def update_count(self, name: str) -> int:
        st = self.states.get(name)
        return 0 if st is None else st.t
