"""Adam with bias correction, plus a parameter-group wrapper for training."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from emorag.errors import NumericError, PreconditionError
from emorag.numkit.autodiff import DiffTensor


@dataclass
class AdamState:
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[DiffTensor], beta1=0.9, beta2=0.999, epsilon=1e-8):
        return cls(
            step_count=0,
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            beta1=beta1,
            beta2=beta2,
            epsilon=epsilon,
        )


def adam_step(
    params: Sequence[DiffTensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """Apply one bias-corrected Adam update in place.

    ``params[i].data`` and the moment buffers in ``state`` are updated and
    ``state.step_count`` grows by one.  Non-finite gradients are rejected
    before anything is touched.
    """
    if not lr > 0:
        raise PreconditionError(f"learning rate must be positive, got {lr}")
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise PreconditionError("Adam state is not aligned with the parameter list")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise PreconditionError(f"gradient/state shape {np.shape(g)} does not match parameter {p.shape}")
    for g in grads:
        if not np.isfinite(g).all():
            raise NumericError("non-finite gradient passed to adam_step")

    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    t = state.step_count + 1
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        m = b1 * state.first_moment[i] + (1.0 - b1) * g
        v = b2 * state.second_moment[i] + (1.0 - b2) * (g * g)
        state.first_moment[i] = m
        state.second_moment[i] = v
        p.data = p.data - lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
    state.step_count = t


class Adam:
    """Parameter groups sharing one schedule; each group scales the base rate.

    >>> opt = Adam([(encoder_params, 0.1), (other_params, 1.0)])
    >>> opt.step(lr=6e-4)  # encoder group steps at 6e-5
    """

    def __init__(self, groups, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.groups = [(list(params), float(mult)) for params, mult in groups]
        self.states = [AdamState.for_params(ps, beta1, beta2, epsilon) for ps, _ in self.groups]

    @property
    def step_count(self) -> int:
        return self.states[0].step_count if self.states else 0

    def zero_grad(self) -> None:
        for params, _ in self.groups:
            for p in params:
                p.zero_grad()

    def step(self, lr: float) -> None:
        # validate every group first so a bad gradient leaves all state intact
        for params, _ in self.groups:
            for p in params:
                if not np.isfinite(p.grad).all():
                    raise NumericError("non-finite gradient in optimizer step")
        for (params, mult), state in zip(self.groups, self.states):
            adam_step(params, [p.grad for p in params], state, lr * mult)
