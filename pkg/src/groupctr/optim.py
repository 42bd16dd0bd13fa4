"""Adam updates over a ParameterStore."""

from __future__ import annotations

import numpy as np

from .grids import ParameterStore


class OptimizerError(Exception):
    """A step could not be applied; parameters were left untouched."""


def adam_step(params: ParameterStore, lr: float,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Apply one bias-corrected Adam update to every parameter in place.

    All gradients are checked first: a non-finite entry anywhere aborts the
    step before any parameter moves.  Gradients are zeroed after the update.
    """
    for param in params:
        if not np.isfinite(param.gradient.data).all():
            raise OptimizerError(
                f"non-finite gradient for parameter '{param.name}'")
    for param in params:
        g = param.gradient.data
        m = param.adam_m.data
        v = param.adam_v.data
        t = param.step_count + 1
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        param.grid.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        param.step_count = t
        param.zero_gradient()
