"""Bias-corrected Adam, shared by network training and perturbation search."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError

__all__ = ["AdamState", "adam_init", "adam_step"]


@dataclass(frozen=True)
class AdamState:
    """Moment estimates and hyper-parameters for one parameter tensor."""

    m1: np.ndarray
    m2: np.ndarray
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Fresh optimizer state for a parameter tensor of the given shape."""
    shape = tuple(np.atleast_1d(shape).tolist()) if not isinstance(shape, tuple) else shape
    return AdamState(
        m1=np.zeros(shape), m2=np.zeros(shape), t=0,
        lr=float(lr), beta1=float(beta1), beta2=float(beta2), eps=float(eps),
    )


def adam_step(state, params, grad):
    """One optimizer update; returns ``(new_params, new_state)``.

    Implements the standard first/second-moment update with bias
    correction.  The update is a pure function of its arguments, so
    identical inputs produce bit-identical outputs.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or params.shape != state.m1.shape:
        raise ContractError(
            f"shape mismatch: params {params.shape}, grad {grad.shape}, "
            f"moments {state.m1.shape}"
        )
    t = state.t + 1
    m1 = state.beta1 * state.m1 + (1.0 - state.beta1) * grad
    m2 = state.beta2 * state.m2 + (1.0 - state.beta2) * grad * grad
    m1_hat = m1 / (1.0 - state.beta1**t)
    m2_hat = m2 / (1.0 - state.beta2**t)
    new_params = params - state.lr * m1_hat / (np.sqrt(m2_hat) + state.eps)
    return new_params, replace(state, m1=m1, m2=m2, t=t)
