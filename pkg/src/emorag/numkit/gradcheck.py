"""Central finite-difference checks against the reverse-mode gradients."""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from emorag.errors import NumericError, PreconditionError
from emorag.numkit.autodiff import DiffTensor, backward, no_grad


def _scalar(value) -> float:
    if isinstance(value, DiffTensor):
        value = value.item()
    value = float(value)
    if not math.isfinite(value):
        raise NumericError("objective is not finite at a perturbed point")
    return value


def grad_check(
    f: Callable[[], DiffTensor],
    params: Sequence[DiffTensor],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` takes no arguments and reads ``params`` through closure.  The error
    per element is ``|a - n| / max(|a|, |n|, 1e-8)``; the maximum over every
    element of every parameter is returned.
    """
    if not h > 0:
        raise PreconditionError(f"step h must be positive, got {h}")
    for p in params:
        p.zero_grad()
    loss = f()
    _scalar(loss)
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    with no_grad():
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            g_flat = grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                try:
                    flat[i] = orig + h
                    f_plus = _scalar(f())
                    flat[i] = orig - h
                    f_minus = _scalar(f())
                except NumericError as exc:
                    raise NumericError(f"objective not finite near element {i}: {exc}") from None
                finally:
                    flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = g_flat[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
