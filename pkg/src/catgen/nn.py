"""Parameter containers and small network blocks built on :mod:`catgen.autodiff`."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor, Parameter

LOG_2PI = math.log(2.0 * math.pi)


class Module:
    """Collects parameters from attributes, recursively and in definition order."""

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, DiffTensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[DiffTensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.value = np.array(state[name], dtype=state[name].dtype)

    def astype(self, dtype):
        for p in self.parameters():
            p.value = p.value.astype(dtype)
        return self

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float64)

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero: bool = False):
        if zero:
            w = np.zeros((n_in, n_out))
        else:
            bound = 1.0 / math.sqrt(n_in)
            w = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out))

    def __call__(self, x):
        return ad.affine(x, self.weight, self.bias)


class MLP(Module):
    """Fully connected net with SiLU activations; optional zero-initialised output."""

    def __init__(self, n_in: int, hidden: int, n_out: int, depth: int,
                 rng: np.random.Generator, zero_out: bool = True):
        sizes = [n_in] + [hidden] * depth
        self.hidden = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.out = Linear(sizes[-1], n_out, rng, zero=zero_out)

    def __call__(self, x):
        h = x
        for layer in self.hidden:
            h = ad.silu(layer(h))
        return self.out(h)


def gaussian_log_prob(z, mean=0.0, log_std=0.0, axes=None):
    """Diagonal Gaussian log-density, summed over ``axes`` (all but the first by default)."""
    eps = (z - mean) * ad.exp(-log_std)
    lp = -0.5 * ad.square(eps) - log_std - 0.5 * LOG_2PI
    ndim = np.ndim(ad.value(lp))
    if axes is None:
        axes = tuple(range(1, ndim))
    return ad.sum_(lp, axis=axes) if axes else lp


class ConditionalGaussian(Module):
    """q(u | x): a diagonal Gaussian over (D, K) whose parameters are looked up per class.

    For each dimension ``d`` the mean and log-std vectors are rows of a learned
    ``(D, K, K)`` table selected by ``x[:, d]``.
    """

    def __init__(self, D: int, K: int, init_log_std: float = 0.0):
        self.D, self.K = D, K
        self.mean = Parameter(np.zeros((D, K, K)))
        self.log_std = Parameter(np.full((D, K, K), init_log_std))

    def params_for(self, x):
        rows = (np.arange(self.D)[None, :], np.asarray(x))
        return ad.slice_(self.mean, rows), ad.slice_(self.log_std, rows)

    def sample(self, x, rng: np.random.Generator):
        """Return ``(u, log q(u|x))`` with ``u`` of shape (B, D, K)."""
        mean, log_std = self.params_for(x)
        eps = rng.standard_normal((len(x), self.D, self.K)).astype(self.dtype)
        u = mean + ad.exp(log_std) * eps
        log_q = ad.sum_(-0.5 * eps**2 - 0.5 * LOG_2PI - log_std, axis=(1, 2))
        return u, log_q

    def log_prob(self, u, x):
        mean, log_std = self.params_for(x)
        return gaussian_log_prob(u, mean, log_std, axes=(1, 2))


class SigmoidGaussian(Module):
    """Noise on (0, 1)^K: a conditional Gaussian squashed by a sigmoid."""

    def __init__(self, D: int, K: int, init_log_std: float = 0.0):
        self.D, self.K = D, K
        self.base = ConditionalGaussian(D, K, init_log_std)

    def sample(self, x, rng: np.random.Generator):
        w, log_q = self.base.sample(x, rng)
        u = ad.sigmoid(w)
        # log |du/dw| = log sigmoid(w) + log sigmoid(-w)
        log_jac = ad.log_sigmoid(w) + ad.log_sigmoid(-w)
        return u, log_q - ad.sum_(log_jac, axis=(1, 2))


class UniformNoise(Module):
    """U(eps, 1-eps)^K noise with log-density 0; no parameters."""

    def __init__(self, D: int, K: int, eps: float = 1e-10):
        self.D, self.K, self.eps = D, K, eps

    def sample(self, x, rng: np.random.Generator):
        u = rng.uniform(self.eps, 1.0 - self.eps, size=(len(x), self.D, self.K))
        return u, np.zeros(len(x))
