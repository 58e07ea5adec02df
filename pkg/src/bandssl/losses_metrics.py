"""Scatter-regularized MSE loss, its gradient, and the MAE / Sigma metrics.

The loss on a batch of ``n`` clusters is::

    total = mean((y - y_hat)**2) + alpha * std(|y - y_hat|)

with ``std`` the population (divide-by-n) standard deviation. ``sigma`` is
that same scatter term, so the metric and the regularizer cannot drift apart.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class NonDifferentiableError(ValueError):
    """The loss has a kink at the requested point."""


@dataclass(frozen=True)
class LossOutput:
    total: float
    mse_term: float
    scatter_term: float
    alpha: float
    n: int


def _pair(y_true, y_pred) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y_true, dtype=np.float64).ravel()
    p = np.asarray(y_pred, dtype=np.float64).ravel()
    if y.shape != p.shape:
        raise ValueError(f"length mismatch: {y.size} vs {p.size}")
    if y.size == 0:
        raise ValueError("need at least one sample")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(p))):
        raise ValueError("non-finite values in inputs")
    return y, p


def _scatter(abs_residuals: np.ndarray) -> float:
    return float(np.std(abs_residuals))


def loss_eq1(y_true, y_pred, alpha: float = 1.0) -> LossOutput:
    if not alpha >= 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    y, p = _pair(y_true, y_pred)
    residual = y - p
    mse = float(np.mean(residual**2))
    scatter = _scatter(np.abs(residual))
    return LossOutput(mse + alpha * scatter, mse, scatter, float(alpha), y.size)


def mae(y_true, y_pred) -> float:
    y, p = _pair(y_true, y_pred)
    return float(np.mean(np.abs(y - p)))


def sigma(y_true, y_pred) -> float:
    y, p = _pair(y_true, y_pred)
    return _scatter(np.abs(y - p))


def loss_gradient(y_true, y_pred, alpha: float = 1.0) -> np.ndarray:
    """Analytic d(total)/d(y_pred).

    Raises NonDifferentiableError where the absolute value or the square root
    of the scatter term has a kink instead of picking a subgradient.
    """
    y, p = _pair(y_true, y_pred)
    n = y.size
    residual = p - y
    grad = 2.0 * residual / n
    if alpha == 0 or n == 1:
        return grad
    zero = np.flatnonzero(residual == 0)
    if zero.size:
        raise NonDifferentiableError(
            f"zero residual at indices {zero.tolist()}: |.| is not differentiable there"
        )
    a = np.abs(residual)
    s = np.std(a)
    if s == 0:
        raise NonDifferentiableError("all residual magnitudes equal: std is not differentiable")
    grad += alpha * (a - a.mean()) / (n * s) * np.sign(residual)
    return grad


def torch_loss(y_true: torch.Tensor, y_pred: torch.Tensor, alpha: float = 1.0) -> torch.Tensor:
    """Differentiable training loss; identical value to ``loss_eq1``.

    At a zero residual or zero scatter the subgradient 0 is used so
    optimisation never halts.
    """
    residual = y_true - y_pred
    mse = residual.pow(2).mean()
    if alpha == 0 or residual.numel() < 2:
        return mse
    a = residual.abs()
    var = (a - a.mean()).pow(2).mean()
    safe = torch.where(var > 0, var, torch.ones_like(var))
    scatter = torch.where(var > 0, safe.sqrt(), torch.zeros_like(var))
    return mse + alpha * scatter
