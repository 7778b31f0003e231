"""Adam optimizer with bias-corrected moment estimates."""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError, NumericError
from .tensor import Tensor


def adam_step(value, grad, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update on a raw array.

    ``state`` is a dict holding ``m``, ``v`` and the step counter ``t``;
    missing entries are initialized to zero. Returns the updated value;
    the state dict is mutated in place.
    """
    value = np.asarray(value, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if value.shape != grad.shape:
        raise DimensionError(f"adam_step: value shape {value.shape} != grad shape {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("adam_step: non-finite gradient, step aborted")
    if "m" not in state:
        state["m"] = np.zeros_like(value)
        state["v"] = np.zeros_like(value)
        state["t"] = 0
    state["t"] += 1
    t = state["t"]
    state["m"] = beta1 * state["m"] + (1.0 - beta1) * grad
    state["v"] = beta2 * state["v"] + (1.0 - beta2) * grad * grad
    m_hat = state["m"] / (1.0 - beta1 ** t)
    v_hat = state["v"] / (1.0 - beta2 ** t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a named parameter dict; missing grads count as zero."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = {name: {} for name in params}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data = adam_step(p.data, grad, self.state[name], self.lr,
                               self.beta1, self.beta2, self.eps)
