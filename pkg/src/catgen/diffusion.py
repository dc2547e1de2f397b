"""Multinomial diffusion in log-space.

Time indexing used throughout: data lives at ``t = 0`` and the forward chain
takes steps ``t = 1..T``. ``q_posterior(log_x0, log_x_t, t)`` and
``p_pred(log_x_t, t)`` both return a distribution over ``x_{t-1}``; at
``t = 1`` that distribution is over the data itself, where the posterior is a
delta on ``x0`` and the model's reverse step is ``C(x0 | x0_hat)``.

Kernels accept a step as a Python int or as an integer array with one entry
per batch row. They are built from :mod:`catgen.autodiff` ops, so passing plain
arrays returns plain arrays and passing a :class:`DiffTensor` (e.g. a predicted
``log x0_hat``) keeps the computation differentiable.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .nn import Linear, Module
from .numerics import (
    LOG_ZERO,
    categorical_kl,
    index_to_log_onehot,
    log_onehot_to_index,
    sample_categorical,
)
from .schedule import NoiseSchedule, build_schedule

HISTORY_CAPACITY = 10
ENUMERATE_MAX_STATES = 256
ENUMERATE_MAX_T = 16


def _coef(arr: np.ndarray, t, like):
    """Schedule entries at step(s) ``t`` (float64), shaped to broadcast against ``like``."""
    vals = np.asarray(arr[np.asarray(t)], dtype=np.float64)
    if vals.ndim:
        vals = vals.reshape((-1,) + (1,) * (np.ndim(ad.value(like)) - 1))
    return vals


def _num_classes(log_x) -> int:
    return ad.value(log_x).shape[-1]


def q_forward_one_step(schedule: NoiseSchedule, log_x_tm1, t):
    """log q(x_t | x_{t-1}) = log[alpha_t x_{t-1} + (1 - alpha_t) / K]."""
    schedule.check_step(t)
    K = _num_classes(log_x_tm1)
    return ad.log_add_exp(
        log_x_tm1 + _coef(schedule.log_alpha, t, log_x_tm1),
        _coef(schedule.log_1_min_alpha, t, log_x_tm1) - math.log(K),
    )


def q_marginal(schedule: NoiseSchedule, log_x0, t):
    """log q(x_t | x_0) = log[abar_t x_0 + (1 - abar_t) / K]; ``t = 0`` returns ~x_0."""
    schedule.check_step(t, lo=0)
    K = _num_classes(log_x0)
    return ad.log_add_exp(
        log_x0 + _coef(schedule.log_cumprod_alpha, t, log_x0),
        _coef(schedule.log_1_min_cumprod_alpha, t, log_x0) - math.log(K),
    )


def q_posterior(schedule: NoiseSchedule, log_x0, log_x_t, t):
    """log q(x_{t-1} | x_t, x_0), normalised over classes.

    Only the one-step kernel evaluated *at x_t* is needed: the kernel value
    C(x_t | alpha x_{t-1} + (1-alpha)/K) is symmetric in x_t and x_{t-1}. At
    ``t = 1`` the result is ``log_x0`` unchanged. ``log_x0`` may be a soft
    probability vector (a model prediction) as long as it is normalised.
    """
    schedule.check_step(t)
    t_arr = np.asarray(t)
    log_prev = q_marginal(schedule, log_x0, t_arr - 1)
    unnormed = log_prev + q_forward_one_step(schedule, log_x_t, t)
    post = ad.log_softmax(unnormed, axis=-1)
    if t_arr.ndim == 0:
        return log_x0 if int(t_arr) == 1 else post
    first = _coef((np.arange(schedule.T + 1) == 1).astype(np.float64), t_arr, ad.value(post))
    if not first.any():
        return post
    return first * log_x0 + (1.0 - first) * post


def categorical_kl_sum(log_a, log_b):
    """KL per sample: summed over classes and dimensions."""
    kl = ad.sum_(ad.exp(log_a) * (log_a - log_b), axis=-1)
    return ad.sum_(kl, axis=-1)


def sinusoidal_embedding(t, dim: int, dtype=np.float64) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


class ResBlock(Module):
    def __init__(self, width: int, rng):
        self.fc1 = Linear(width, width, rng)
        self.fc2 = Linear(width, width, rng)

    def __call__(self, h):
        return h + self.fc2(ad.silu(self.fc1(ad.silu(h))))


class Denoiser(Module):
    """Residual MLP ``mu(x_t, t)`` producing (B, D, K) logits for x0.

    Input is the flattened one-hot of ``x_t`` concatenated with a sinusoidal
    embedding of ``t``. With ``zero_out`` the output layer starts at zero, i.e.
    the initial prediction is uniform.
    """

    def __init__(self, D: int, K: int, hidden: int = 128, depth: int = 2,
                 temb_dim: int = 32, seed: int = 0, zero_out: bool = True):
        rng = np.random.default_rng(seed)
        self.D, self.K, self.temb_dim = D, K, temb_dim
        self.inp = Linear(D * K + temb_dim, hidden, rng)
        self.blocks = [ResBlock(hidden, rng) for _ in range(depth)]
        self.out = Linear(hidden, D * K, rng, zero=zero_out)

    def __call__(self, x_t, t):
        x_t = np.asarray(x_t)
        B = len(x_t)
        dtype = self.dtype
        onehot = np.eye(self.K, dtype=dtype)[x_t].reshape(B, self.D * self.K)
        t = np.broadcast_to(np.asarray(t), (B,))
        feats = np.concatenate([onehot, sinusoidal_embedding(t, self.temb_dim, dtype)], axis=1)
        h = self.inp(feats)
        for block in self.blocks:
            h = block(h)
        logits = self.out(ad.silu(h))
        return ad.reshape(logits, (B, self.D, self.K))


@dataclass
class LossHistory:
    """Per-step ring buffers of recent squared loss values ``L_t^2``."""

    T: int
    capacity: int = HISTORY_CAPACITY
    buffer: np.ndarray = field(init=False)
    counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.buffer = np.zeros((self.T + 1, self.capacity))
        self.counts = np.zeros(self.T + 1, dtype=np.int64)

    def record(self, t, losses):
        for ti, li in zip(np.atleast_1d(t), np.atleast_1d(losses)):
            self.buffer[ti, self.counts[ti] % self.capacity] = float(li) ** 2
            self.counts[ti] += 1

    @property
    def warm(self) -> bool:
        return bool(np.all(self.counts[1:] >= self.capacity))

    def probabilities(self) -> np.ndarray:
        """q(t) for t = 1..T (array of length T)."""
        if not self.warm:
            return np.full(self.T, 1.0 / self.T)
        w = np.sqrt(self.buffer[1:].mean(axis=1))
        if not np.all(np.isfinite(w)) or w.sum() <= 0:
            return np.full(self.T, 1.0 / self.T)
        return w / w.sum()


def sample_t_importance(history: LossHistory, rng: np.random.Generator, size: int | None = None):
    """Draw step(s) t ~ q(t); returns ``(t, 1 / q(t))``."""
    q = history.probabilities()
    idx = rng.choice(history.T, size=size, p=q)
    return idx + 1, 1.0 / q[idx]


class DiffusionModel:
    """Noise schedule plus denoiser; the generative reverse chain."""

    def __init__(self, D: int, K: int, T: int = 100, s: float = 0.008,
                 denoiser: Denoiser | None = None, schedule: NoiseSchedule | None = None, **denoiser_kw):
        self.D, self.K = D, K
        self.schedule = schedule if schedule is not None else build_schedule(T, s)
        self.T = self.schedule.T
        self.denoiser = denoiser if denoiser is not None else Denoiser(D, K, **denoiser_kw)
        self.history = LossHistory(self.T)

    @property
    def dtype(self):
        return self.denoiser.dtype

    def parameters(self):
        return self.denoiser.parameters()

    def log_onehot(self, x) -> np.ndarray:
        return index_to_log_onehot(np.asarray(x), self.K, dtype=np.float64)

    # kernels bound to this model's schedule
    def q_forward_one_step(self, log_x_tm1, t):
        return q_forward_one_step(self.schedule, log_x_tm1, t)

    def q_marginal(self, log_x0, t):
        return q_marginal(self.schedule, log_x0, t)

    def q_posterior(self, log_x0, log_x_t, t):
        return q_posterior(self.schedule, log_x0, log_x_t, t)

    def predict_x0(self, log_x_t, t):
        """log x0_hat = log_softmax(mu(x_t, t))."""
        x_t = log_onehot_to_index(ad.value(log_x_t))
        return ad.log_softmax(self.denoiser(x_t, t), axis=-1)

    def p_pred(self, log_x_t, t):
        """log p(x_{t-1} | x_t) via the posterior evaluated at x0_hat."""
        self.schedule.check_step(t)
        return self.q_posterior(self.predict_x0(log_x_t, t), log_x_t, t)

    def loss_term(self, log_x0, log_x_t, t):
        """KL(q(x_{t-1}|x_t,x0) || p(x_{t-1}|x_t)) summed over dimensions.

        At ``t = 1`` this equals ``-log p(x0 | x1)`` because x0 is one-hot.
        """
        log_true = self.q_posterior(log_x0, log_x_t, t)
        log_model = self.p_pred(log_x_t, t)
        return categorical_kl_sum(log_true, log_model)

    def prior_kl(self, log_x0) -> np.ndarray:
        """KL(q(x_T | x0) || uniform) summed over dimensions."""
        log_qT = self.q_marginal(ad.value(log_x0), self.T)
        uniform = np.full_like(log_qT, -math.log(self.K))
        return categorical_kl(log_qT, uniform).sum(axis=-1)

    def sample_q(self, log_x0, t, rng: np.random.Generator) -> np.ndarray:
        return sample_categorical(self.q_marginal(log_x0, t), rng)

    def training_loss(self, x0, rng: np.random.Generator, importance: bool = True):
        """Per-sample negative ELBO estimate with t ~ q(t), reweighted by 1/q(t).

        Returns ``(loss, t, L_t)``; ``loss`` is differentiable. The caller is
        responsible for recording ``L_t`` into ``self.history``.
        """
        x0 = np.asarray(x0)
        B = len(x0)
        if importance:
            t, weight = sample_t_importance(self.history, rng, size=B)
        else:
            t = rng.integers(1, self.T + 1, size=B)
            weight = np.full(B, float(self.T))
        log_x0 = self.log_onehot(x0)
        log_x_t = self.log_onehot(self.sample_q(log_x0, t, rng))
        lt = self.loss_term(log_x0, log_x_t, t)
        loss = lt * weight + self.prior_kl(log_x0)
        return loss, t, np.asarray(ad.value(lt), dtype=np.float64)

    def _expected_loss_enumerated(self, log_x0, t) -> np.ndarray:
        B, D, K = log_x0.shape
        states = np.array(list(itertools.product(range(K), repeat=D)), dtype=np.int64)
        S = len(states)
        log_q = self.q_marginal(log_x0, t)  # (B, D, K)
        # log q(x_t = s | x0) for every state s: (B, S)
        log_w = log_q[:, np.arange(D)[None, :], states].sum(axis=-1)
        rep_x0 = np.repeat(log_x0, S, axis=0)
        log_x_t = self.log_onehot(np.tile(states, (B, 1)))
        lt = np.asarray(ad.value(self.loss_term(rep_x0, log_x_t, t)), dtype=np.float64).reshape(B, S)
        return np.sum(np.exp(log_w) * lt, axis=1)

    def loss_terms(self, x0, rng: np.random.Generator | None = None, enumerate_states: bool | None = None):
        """All terms L_1..L_T per sample, shape (B, T).

        Exact expectation over x_t when the state space and T are small enough,
        otherwise one x_t draw per (sample, t).
        """
        x0 = np.asarray(x0)
        log_x0 = self.log_onehot(x0)
        if enumerate_states is None:
            enumerate_states = self.K**self.D <= ENUMERATE_MAX_STATES and self.T <= ENUMERATE_MAX_T
        if rng is None:
            rng = np.random.default_rng(0)
        out = np.zeros((len(x0), self.T))
        for t in range(1, self.T + 1):
            if enumerate_states:
                out[:, t - 1] = self._expected_loss_enumerated(log_x0, t)
            else:
                log_x_t = self.log_onehot(self.sample_q(log_x0, t, rng))
                out[:, t - 1] = np.asarray(ad.value(self.loss_term(log_x0, log_x_t, t)), dtype=np.float64)
        return out

    def elbo(self, x0, mode: str = "full", rng: np.random.Generator | None = None,
             enumerate_states: bool | None = None) -> np.ndarray:
        """Lower bound on log P(x0) in nats, one value per sample."""
        x0 = np.asarray(x0)
        log_x0 = self.log_onehot(x0)
        prior = self.prior_kl(log_x0).astype(np.float64)
        if mode == "full":
            return -(self.loss_terms(x0, rng, enumerate_states).sum(axis=1) + prior)
        if mode == "sampled":
            rng = rng if rng is not None else np.random.default_rng(0)
            loss, _, _ = self.training_loss(x0, rng)
            return -np.asarray(ad.value(loss), dtype=np.float64)
        raise ValueError(f"unknown ELBO mode {mode!r}; expected 'full' or 'sampled'")

    def sample(self, n: int, rng: np.random.Generator, chunk: int = 20000) -> np.ndarray:
        """Ancestral sampling: x_T uniform, then x_{t-1} ~ p(x_{t-1} | x_t) down to x_0."""
        parts = []
        for start in range(0, n, chunk):
            m = min(chunk, n - start)
            x = rng.integers(0, self.K, size=(m, self.D))
            for t in range(self.T, 0, -1):
                log_p = ad.value(self.p_pred(self.log_onehot(x), t))
                x = sample_categorical(log_p, rng)
            parts.append(x)
        return np.concatenate(parts, axis=0) if parts else np.zeros((0, self.D), dtype=np.int64)

    def denoise_once(self, x1) -> np.ndarray:
        """Most likely x0 under p(x0 | x1): a single forward pass."""
        x1 = np.asarray(x1)
        log_x0_hat = ad.value(self.predict_x0(self.log_onehot(x1), 1))
        return log_onehot_to_index(log_x0_hat)


# Functional aliases matching the model methods.

def p_pred(model: DiffusionModel, log_x_t, t):
    return model.p_pred(log_x_t, t)


def loss_term(model: DiffusionModel, log_x0, log_x_t, t):
    return model.loss_term(log_x0, log_x_t, t)


def prior_kl(model: DiffusionModel, log_x0):
    return model.prior_kl(log_x0)


def elbo(model: DiffusionModel, x0, mode: str = "full", rng=None):
    return model.elbo(x0, mode=mode, rng=rng)


def ancestral_sample(model: DiffusionModel, n: int, rng: np.random.Generator):
    return model.sample(n, rng)


def denoise_once(model: DiffusionModel, x1):
    return model.denoise_once(x1)


def nats_to_bpd(nats, D: int):
    return np.asarray(nats) / (D * math.log(2.0))


__all__ = [
    "LOG_ZERO",
    "DiffusionModel",
    "Denoiser",
    "LossHistory",
    "q_forward_one_step",
    "q_marginal",
    "q_posterior",
    "p_pred",
    "loss_term",
    "prior_kl",
    "elbo",
    "sample_t_importance",
    "ancestral_sample",
    "denoise_once",
    "nats_to_bpd",
]
