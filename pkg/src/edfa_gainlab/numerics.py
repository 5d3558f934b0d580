"""Dense numerics shared by the whole package: SELU, init, Adam, masked loss.

Matrices are plain ``float64`` numpy arrays. Weight matrices are stored
``(fan_out, fan_in)`` so a batch ``X`` of shape ``(n, fan_in)`` maps to
``X @ W.T``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

# Fixed-point constants of the self-normalizing construction. Not configurable.
SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772


def selu(x):
    """Scaled exponential linear unit, elementwise.

    ``lambda * x`` for ``x > 0`` and ``lambda * alpha * (exp(x) - 1)`` otherwise.
    Accepts Python floats or arrays; returns the same kind.
    """
    x = np.asarray(x, dtype=np.float64)
    out = SELU_LAMBDA * np.where(x > 0.0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))
    return float(out) if out.ndim == 0 else out


def selu_derivative(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x > 0.0, SELU_LAMBDA, SELU_LAMBDA * SELU_ALPHA * np.exp(np.minimum(x, 0.0)))
    return float(out) if out.ndim == 0 else out


def lecun_normal_init(fan_in: int, rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a ``rows x cols`` matrix from N(0, 1/fan_in)."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(rows, cols))


@dataclass
class AdamState:
    """Moment estimates for one parameter array."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(params, dtype=np.float64),
                   np.zeros_like(params, dtype=np.float64), **hyper)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              learning_rate: float) -> np.ndarray:
    """Apply one bias-corrected Adam update.

    Returns the new parameter array; ``state`` is advanced in place.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"shape mismatch: params {params.shape} vs grads {grads.shape}")
    if state.first_moment.shape != params.shape:
        raise ValueError(f"optimizer state shape {state.first_moment.shape} "
                         f"does not match params {params.shape}")
    if not learning_rate > 0:
        raise ValueError(f"learning_rate must be > 0, got {learning_rate}")

    b1, b2 = state.beta1, state.beta2
    state.step_count += 1
    t = state.step_count
    m, v = state.first_moment, state.second_moment
    m *= b1
    m += (1.0 - b1) * grads
    v *= b2
    v += (1.0 - b2) * np.square(grads)
    denom = np.sqrt(v / (1.0 - b2 ** t))
    denom += state.epsilon
    new = params - (learning_rate / (1.0 - b1 ** t)) * m / denom
    if not np.isfinite(new.sum()):
        raise FloatingPointError("Adam update produced non-finite parameters")
    return new


def masked_mse(pred, target, mask) -> float:
    """Mean squared error over entries where ``mask`` is set.

    Inputs may be vectors or batches; all entries flagged in ``mask`` are
    pooled. Target values at masked-out positions are ignored (may be NaN).
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask).astype(bool)
    if not (pred.shape == target.shape == mask.shape):
        raise ValueError(f"length mismatch: {pred.shape}, {target.shape}, {mask.shape}")
    n_active = int(mask.sum())
    if n_active == 0:
        raise ValueError("mask has no active entries")
    diff = np.where(mask, pred - np.where(mask, target, 0.0), 0.0)
    return float(np.sum(diff * diff) / n_active)


def finite_difference_gradient(loss_fn: Callable[[np.ndarray], float],
                               params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``loss_fn`` at ``params``."""
    if not h > 0:
        raise ValueError("h must be positive")
    base = np.array(params, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(base)
        flat[i] = orig - h
        down = loss_fn(base)
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad
