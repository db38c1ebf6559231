from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tensor, as_tensor

SIGMA_FLOOR = 1e-6
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def mse_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss shape mismatch {pred.shape} vs {target.shape}")
    return ops.mean(ops.square(ops.sub(pred, target)))


def gaussian_nll(mu, sigma, y) -> Tensor:
    """Mean Gaussian negative log-likelihood, ``0.5 ln(2 pi sigma^2) + r^2 / (2 sigma^2)``."""
    mu, sigma, y = as_tensor(mu), as_tensor(sigma), as_tensor(y)
    if not (mu.shape == sigma.shape == y.shape):
        raise ValueError(f"gaussian_nll shape mismatch {mu.shape}, {sigma.shape}, {y.shape}")
    if np.any(sigma.data < SIGMA_FLOOR):
        raise ValueError("sigma below floor")
    resid = ops.sub(y, mu)
    quad = ops.div(ops.square(resid), ops.mul(ops.square(sigma), 2.0))
    return ops.add(ops.mean(ops.add(ops.log(sigma), quad)), _HALF_LOG_2PI)


def positive_sigma(raw) -> Tensor:
    """Map an unconstrained head output to a standard deviation."""
    return ops.add(ops.softplus(raw), SIGMA_FLOOR)
