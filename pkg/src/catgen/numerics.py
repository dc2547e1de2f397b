"""Log-space primitives for categorical distributions.

Arrays carrying log-probabilities keep the class axis last, so a batch of
``D``-dimensional categorical variables over ``K`` classes has shape
``(batch, D, K)``. Zero probabilities are represented by ``log(1e-40)`` rather
than ``-inf``; that constant is the only "log of zero" used in the package.
"""

from __future__ import annotations

import numpy as np

# The single sentinel for log(0). Kept as in the original log-space recipe.
LOG_EPS = 1e-40
LOG_ZERO = float(np.log(LOG_EPS))

# Type aliases: plain ndarrays, documented by convention.
LogProbTensor = np.ndarray  # float, shape (..., K), class axis last
CategoricalBatch = np.ndarray  # int, shape (batch, D), values in [0, K)


def log_add_exp(a, b):
    """Elementwise ``log(exp(a) + exp(b))`` using the max-shift trick."""
    a, b = np.asarray(a), np.asarray(b)
    dtype = np.result_type(a, b, np.float64)
    a, b = a.astype(dtype), b.astype(dtype)
    maximum = np.maximum(a, b)
    # Both -inf: shift by 0 so the result stays -inf instead of NaN.
    shift = np.where(np.isneginf(maximum), 0.0, maximum)
    with np.errstate(divide="ignore"):
        return shift + np.log(np.exp(a - shift) + np.exp(b - shift))


def log_sum_exp(x, axis=-1, keepdims=False):
    """``log(sum(exp(x)))`` along ``axis``, max-shifted."""
    x = np.asarray(x)
    maximum = np.max(x, axis=axis, keepdims=True)
    shift = np.where(np.isneginf(maximum), 0.0, maximum)
    with np.errstate(divide="ignore"):
        out = shift + np.log(np.sum(np.exp(x - shift), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis)
    return out


def log_1_min_a(a):
    """``log(1 - exp(a) + 1e-40)``; finite even at ``a = 0``."""
    a = np.asarray(a)
    return np.log(1.0 - np.exp(a) + LOG_EPS)


def index_to_log_onehot(x, num_classes: int, dtype=np.float64) -> LogProbTensor:
    """Log of a one-hot encoding, with zeros clamped to 1e-40 before the log."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.integer):
        raise TypeError(f"class indices must be integers, got {x.dtype}")
    if x.size and (x.min() < 0 or x.max() >= num_classes):
        raise ValueError(
            f"class index out of range [0, {num_classes}): "
            f"min={x.min()}, max={x.max()}"
        )
    onehot = np.eye(num_classes, dtype=dtype)[x]
    return np.log(np.maximum(onehot, LOG_EPS))


def log_onehot_to_index(log_x: LogProbTensor) -> CategoricalBatch:
    """Argmax over the class axis. Ties go to the lowest index."""
    return np.argmax(log_x, axis=-1)


def categorical_kl(log_a: LogProbTensor, log_b: LogProbTensor):
    """KL(a || b) per categorical variable, summed over the class axis."""
    return np.sum(np.exp(log_a) * (log_a - log_b), axis=-1)


def sample_categorical(log_p: LogProbTensor, rng: np.random.Generator) -> CategoricalBatch:
    """Draw one class per row of ``log_p`` with the Gumbel-max trick."""
    u = rng.uniform(size=np.shape(log_p))
    gumbel = -np.log(-np.log(u + 1e-30) + 1e-30)
    return np.argmax(log_p + gumbel, axis=-1)


def is_normalized(log_p: LogProbTensor, atol: float = 1e-6) -> bool:
    return bool(np.all(np.abs(log_sum_exp(log_p, axis=-1)) <= atol))
