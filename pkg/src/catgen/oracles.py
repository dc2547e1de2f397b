"""Independent brute-force references in linear probability space.

Nothing here calls the log-space kernels: transition matrices are built from
``alpha_bar`` directly, posteriors come from enumerating Bayes' rule, and
likelihoods from summing over every reverse trajectory.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy import stats

from . import autodiff as ad

# Below this gradient magnitude finite-difference roundoff dominates, so the
# relative error is measured against the floor instead.
REL_ERR_FLOOR = 1e-6
# Richardson-combined central differences carry roundoff of about
# 3 eps |f| / h; the bound adds a safety factor.
FD_ROUNDOFF = 8.0


def transition_matrix(alpha: float, K: int) -> np.ndarray:
    """Q[i, j] = P(x_t = j | x_{t-1} = i) = alpha [i == j] + (1 - alpha) / K."""
    return alpha * np.eye(K) + (1.0 - alpha) / K * np.ones((K, K))


def step_alphas(alpha_bar: np.ndarray) -> np.ndarray:
    """alpha_t = alpha_bar_t / alpha_bar_{t-1} for t = 1..T (index 0 unused, set to 1)."""
    a = np.ones_like(alpha_bar)
    a[1:] = alpha_bar[1:] / alpha_bar[:-1]
    return a


def composed_marginal(x0: int, t: int, alpha_bar: np.ndarray, K: int) -> np.ndarray:
    """Row x0 of Q_1 Q_2 ... Q_t."""
    alphas = step_alphas(alpha_bar)
    p = np.eye(K)[x0]
    for s in range(1, t + 1):
        p = p @ transition_matrix(alphas[s], K)
    return p


def bayes_posterior(x0: int, xt: int, t: int, alpha_bar: np.ndarray, K: int) -> np.ndarray:
    """P(x_{t-1} = k | x_t, x0) by enumerating k."""
    alphas = step_alphas(alpha_bar)
    prior = composed_marginal(x0, t - 1, alpha_bar, K)
    lik = transition_matrix(alphas[t], K)[:, xt]
    joint = prior * lik
    return joint / joint.sum()


def exact_log_likelihood(reverse_probs, T: int, K: int, D: int = 1) -> np.ndarray:
    """log P(x0) for every x0 by summing over all trajectories x_T, ..., x_1.

    ``reverse_probs(x_t, t)`` returns P(x_{t-1} | x_t) as an array (S, D, K)
    for a batch of states ``x_t`` of shape (S, D). The prior on x_T is uniform.
    """
    states = np.array(list(itertools.product(range(K), repeat=D)), dtype=np.int64)
    S = len(states)
    # dist[s] = P(x_t = states[s]); start at uniform x_T
    dist = np.full(S, 1.0 / S)
    for t in range(T, 0, -1):
        probs = reverse_probs(states, t)  # (S, D, K)
        # P(x_{t-1} = s' | x_t = s) = prod_d probs[s, d, s'_d]
        trans = np.prod(probs[:, np.arange(D)[None, :], states], axis=-1)  # (S_from, S_to)
        dist = dist @ trans
    return np.log(dist)


def finite_difference_grad(fn, params: list[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of a scalar ``fn()`` that reads ``params`` in place."""
    grads = []
    for p in params:
        g = np.zeros_like(p, dtype=np.float64)
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(fn())
            flat[i] = old - h
            down = float(fn())
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def gradient_check(loss_fn, params, h: float = 1e-6, max_entries: int | None = None,
                   rng: np.random.Generator | None = None, subtract_roundoff: bool = True) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn()`` must build a scalar from ``params`` (DiffTensors) and be
    deterministic. Central differences at h and h/2 are combined by Richardson
    extrapolation (error O(h^4)). Relative error is ``|a - n| / max(|a| + |n|, 1e-6)``
    computed elementwise; with ``max_entries`` a random subset is checked.
    Only the part of ``|a - n|`` above the roundoff bound of the differences,
    ``FD_ROUNDOFF * eps * (|f| + 1) / h``, counts as error unless
    ``subtract_roundoff`` is off.
    """
    for p in params:
        p.grad = None
    with ad.Tape():
        loss = loss_fn()
        ad.backward(loss)
    f0 = float(np.max(np.abs(ad.value(loss))))
    roundoff = FD_ROUNDOFF * np.finfo(np.float64).eps * (f0 + 1.0) / h if subtract_roundoff else 0.0
    worst = 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        auto = p.grad if p.grad is not None else np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, max_entries, replace=False)
        for i in idx:
            old = flat[i]

            def central(step):
                flat[i] = old + step
                up = float(ad.value(loss_fn()))
                flat[i] = old - step
                down = float(ad.value(loss_fn()))
                flat[i] = old
                return (up - down) / (2 * step)

            # Richardson extrapolation cancels the h^2 truncation term
            num = (4.0 * central(h / 2) - central(h)) / 3.0
            a = auto.reshape(-1)[i]
            denom = max(abs(a) + abs(num), REL_ERR_FLOOR)
            worst = max(worst, max(abs(a - num) - roundoff, 0.0) / denom)
    return worst


def gaussian_orthant_log_prob(mean=(1.0, 0.0)) -> float:
    """log P(v0 > v1) for v ~ N(mean, I) in two dimensions: log Phi((m0 - m1) / sqrt 2)."""
    m0, m1 = mean
    return float(stats.norm.logcdf((m0 - m1) / math.sqrt(2.0)))


def gumbel_max_ks(samples: np.ndarray, loc: float) -> float:
    """KS p-value of ``samples`` against a standard-scale Gumbel at ``loc``."""
    return float(stats.kstest(samples, stats.gumbel_r(loc=loc).cdf).pvalue)


def threshold_density_quadrature(log_q_fn, lo: float = -30.0, hi: float = 30.0, n: int = 4001) -> float:
    """Integral of exp(log_q(v0, v1)) over the plane by the trapezoid rule."""
    grid = np.linspace(lo, hi, n)
    v0, v1 = np.meshgrid(grid, grid, indexing="ij")
    dens = np.exp(log_q_fn(v0, v1))
    return float(np.trapezoid(np.trapezoid(dens, grid, axis=1), grid))
