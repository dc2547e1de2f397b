"""Continuous density models and the argmax-flow objective.

A :class:`FlowModel` maps data ``v`` to a standard-normal latent ``z`` (the
"normalizing" direction used for likelihoods) and back (for sampling).
:class:`ArgmaxFlow` pairs a flow over ``R^{D x K}`` with a probabilistic inverse
``q(v | x)`` and optimises ``log p(v) - log q(v | x)``.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from . import autodiff as ad
from . import surjections as sj
from .nn import LOG_2PI, MLP, ConditionalGaussian, Module, SigmoidGaussian, UniformNoise
from .autodiff import Parameter

POSTERIOR_KINDS = ("softplus", "gumbel", "gumbel-threshold", "uniform-deq", "variational-deq")
ARGMAX_KINDS = ("softplus", "gumbel", "gumbel-threshold")
COUPLING_SCALE_BOUND = 3.0


# ---------------------------------------------------------------------------
# Flow layers. ``forward`` is v -> z and returns (z, log|det dz/dv|) per sample;
# ``inverse`` works on plain arrays.


class ElementwiseAffine(Module):
    """z = (v - loc) * exp(-log_scale)."""

    def __init__(self, dim: int, loc=None, log_scale=None, trainable: bool = True):
        loc = np.zeros(dim) if loc is None else np.asarray(loc, dtype=np.float64)
        log_scale = np.zeros(dim) if log_scale is None else np.asarray(log_scale, dtype=np.float64)
        make = Parameter if trainable else np.asarray
        self.loc = make(loc)
        self.log_scale = make(log_scale)

    def forward(self, v):
        z = (v - self.loc) * ad.exp(-self.log_scale)
        log_det = -ad.sum_(self.log_scale) * np.ones(len(ad.value(v)))
        return z, log_det

    def inverse(self, z):
        return ad.value(z) * np.exp(ad.value(self.log_scale)) + ad.value(self.loc)


class LULinear(Module):
    """Invertible linear map z = v @ W^T + b with W = P L (U + diag(sign * exp(log_s))).

    ``P`` is a fixed permutation, ``L`` unit lower triangular, ``U`` strictly
    upper triangular. log|det W| = sum(log_s).
    """

    def __init__(self, dim: int, rng: np.random.Generator, init: str = "orthogonal"):
        if init == "orthogonal":
            q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
            p, l, u = scipy.linalg.lu(q)
        elif init == "identity":
            p, l, u = np.eye(dim), np.eye(dim), np.eye(dim)
        else:
            raise ValueError(f"unknown LU init {init!r}")
        d = np.diag(u)
        self.perm = p
        self.sign = np.sign(d)
        self.lower_mask = np.tril(np.ones((dim, dim)), -1)
        self.upper_mask = np.triu(np.ones((dim, dim)), 1)
        self.lower = Parameter(l * self.lower_mask)
        self.upper = Parameter(u * self.upper_mask)
        self.log_s = Parameter(np.log(np.abs(d)))
        self.bias = Parameter(np.zeros(dim))

    def weight(self):
        dim = len(self.sign)
        eye = np.eye(dim, dtype=self.log_s.dtype)
        L = self.lower * self.lower_mask + eye
        U = self.upper * self.upper_mask + eye * (self.sign * ad.exp(self.log_s))
        return ad.matmul(self.perm.astype(self.log_s.dtype), ad.matmul(L, U))

    def forward(self, v):
        W = self.weight()
        z = ad.affine(v, ad.transpose(W), self.bias)
        log_det = ad.sum_(self.log_s) * np.ones(len(ad.value(v)), dtype=self.log_s.dtype)
        return z, log_det

    def inverse(self, z):
        W = ad.value(self.weight())
        return np.linalg.solve(W, (z - self.bias.value).T).T


class AffineCoupling(Module):
    """Affine coupling: one half of the vector sets a scale and shift for the other.

    The conditioner's output layer starts at zero, so a fresh layer is the
    identity. Log-scales are soft-clamped to (-3, 3) with a tanh.
    """

    def __init__(self, dim: int, hidden: int, depth: int, rng: np.random.Generator, flip: bool = False):
        self.dim = dim
        self.split = dim // 2
        self.flip = flip
        n_cond = dim - self.split if flip else self.split
        self.n_out = dim - n_cond
        self.net = MLP(n_cond, hidden, 2 * self.n_out, depth, rng, zero_out=True)

    def _halves(self, v):
        a, b = ad.slice_(v, (slice(None), slice(None, self.split))), ad.slice_(v, (slice(None), slice(self.split, None)))
        return (b, a) if self.flip else (a, b)

    def _join(self, cond, moved):
        return ad.concat([moved, cond] if self.flip else [cond, moved], axis=1)

    def _scale_shift(self, cond):
        h = self.net(cond)
        raw_s = ad.slice_(h, (slice(None), slice(None, self.n_out)))
        shift = ad.slice_(h, (slice(None), slice(self.n_out, None)))
        log_s = COUPLING_SCALE_BOUND * ad.tanh(raw_s * (1.0 / COUPLING_SCALE_BOUND))
        return log_s, shift

    def forward(self, v):
        cond, x = self._halves(v)
        log_s, shift = self._scale_shift(cond)
        z = x * ad.exp(log_s) + shift
        return self._join(cond, z), ad.sum_(log_s, axis=1)

    def inverse(self, z):
        cond, y = self._halves(ad.value(z))
        log_s, shift = (ad.value(a) for a in self._scale_shift(cond))
        x = (y - shift) * np.exp(-log_s)
        return ad.value(self._join(cond, x))


class FlowModel(Module):
    """Standard-normal base pushed through a stack of invertible layers."""

    def __init__(self, dim: int, layers: list):
        self.dim = dim
        self.layers = list(layers)

    @classmethod
    def coupling(cls, dim: int, n_layers: int = 4, hidden: int = 64, depth: int = 2,
                 seed: int = 0, lu_init: str = "orthogonal") -> "FlowModel":
        rng = np.random.default_rng(seed)
        layers = []
        for i in range(n_layers):
            layers.append(LULinear(dim, rng, init=lu_init))
            layers.append(AffineCoupling(dim, hidden, depth, rng, flip=bool(i % 2)))
        return cls(dim, layers)

    @classmethod
    def gaussian(cls, mean, log_std=None, trainable: bool = False) -> "FlowModel":
        mean = np.asarray(mean, dtype=np.float64)
        return cls(len(mean), [ElementwiseAffine(len(mean), mean, log_std, trainable=trainable)])

    def forward(self, v):
        """v (B, dim) -> (z, log|det dz/dv|)."""
        z = v
        log_det = 0.0
        for layer in self.layers:
            z, ld = layer.forward(z)
            log_det = log_det + ld
        return z, log_det

    def inverse(self, z):
        v = ad.value(z)
        for layer in reversed(self.layers):
            v = ad.value(layer.inverse(v))
        return v

    def log_prob(self, v):
        """log p(v) = log N(z; 0, I) + log|det dz/dv| per row; accepts (B, dim) or (B, D, K)."""
        shape = ad.value(v).shape
        if len(shape) > 2:
            v = ad.reshape(v, (shape[0], -1))
        z, log_det = self.forward(v)
        base = ad.sum_(-0.5 * ad.square(z), axis=1) - 0.5 * self.dim * LOG_2PI
        return base + log_det

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.dim)).astype(self.dtype)
        return self.inverse(z)


def flow_log_prob(flow: FlowModel, v):
    return flow.log_prob(v)


def flow_sample(flow: FlowModel, n: int, rng: np.random.Generator):
    return flow.sample(n, rng)


# ---------------------------------------------------------------------------
# Probabilistic inverses q(v | x)


class ThresholdPosterior(Module):
    kind = "softplus"

    def __init__(self, D: int, K: int, init_log_std: float = 0.0):
        self.noise = ConditionalGaussian(D, K, init_log_std)

    def sample(self, x, rng):
        return sj.threshold_posterior_sample(x, self.noise, rng)


class GumbelPosterior(Module):
    """Gumbel inverse with locations phi(x) = base[d] + offset[d, x_d]."""

    kind = "gumbel"

    def __init__(self, D: int, K: int):
        self.base = Parameter(np.zeros((D, K)))
        self.offset = Parameter(np.zeros((D, K, K)))
        self.D, self.K = D, K

    def initialize(self, first_batch):
        self.base.value = sj.init_gumbel_locations(first_batch, self.K).astype(self.base.dtype)

    def locations(self, x):
        x = np.asarray(x)
        off = ad.slice_(self.offset, (np.arange(self.D)[None, :], x))
        return ad.broadcast_to(self.base, off.shape) + off

    def sample(self, x, rng):
        return sj.gumbel_posterior_sample(x, self.locations(x), rng)


class GumbelThresholdPosterior(GumbelPosterior):
    kind = "gumbel-threshold"

    def __init__(self, D: int, K: int, noise=None):
        super().__init__(D, K)
        self.noise = noise if noise is not None else SigmoidGaussian(D, K)

    def sample(self, x, rng):
        return sj.gumbel_threshold_posterior(x, self.locations(x), self.noise, rng)


class DequantizationPosterior(Module):
    """Rounding inverse: v = onehot(x) + u, u in (0, 1)^K."""

    def __init__(self, D: int, K: int, variational: bool):
        self.K = K
        self.kind = "variational-deq" if variational else "uniform-deq"
        self.noise = SigmoidGaussian(D, K) if variational else UniformNoise(D, K, eps=0.0)

    def sample(self, x, rng):
        return sj.variational_dequantize(x, self.K, self.noise, rng)


def make_posterior(kind: str, D: int, K: int) -> Module:
    if kind == "softplus":
        return ThresholdPosterior(D, K)
    if kind == "gumbel":
        return GumbelPosterior(D, K)
    if kind == "gumbel-threshold":
        return GumbelThresholdPosterior(D, K)
    if kind in ("uniform-deq", "variational-deq"):
        return DequantizationPosterior(D, K, variational=kind == "variational-deq")
    raise ValueError(f"unknown posterior kind {kind!r}; choose from {POSTERIOR_KINDS}")


# ---------------------------------------------------------------------------


def _log_mean_exp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.mean(np.exp(a - m), axis=axis))


class ArgmaxFlow(Module):
    """Categorical model x = argmax(v), v ~ flow, trained with a learned q(v | x).

    With ``base`` set, each K-ary symbol is first rewritten as ceil(log_base K)
    base-``base`` digits and the flow models those instead.
    """

    def __init__(self, D: int, K: int, posterior: str = "softplus", flow: FlowModel | None = None,
                 posterior_model: Module | None = None, base: int = 0, max_resample: int = 100, **flow_kw):
        self.D, self.K, self.base = D, K, int(base)
        if self.base:
            self.model_D = D * sj.cartesian_digits(K, self.base)
            self.model_K = self.base
        else:
            self.model_D, self.model_K = D, K
        self.posterior_kind = posterior
        self.flow = flow if flow is not None else FlowModel.coupling(self.model_D * self.model_K, **flow_kw)
        self.posterior = posterior_model if posterior_model is not None else make_posterior(posterior, self.model_D, self.model_K)
        self.max_resample = max_resample

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x)
        return sj.cartesian_encode(x, self.K, self.base) if self.base else x

    def initialize(self, first_batch):
        """Data-dependent init (Gumbel locations from class frequencies)."""
        if hasattr(self.posterior, "initialize"):
            self.posterior.initialize(self.encode(first_batch))

    def elbo(self, x, rng: np.random.Generator):
        """Single-sample ELBO log p(v) - log q(v|x) per datum (differentiable)."""
        xm = self.encode(x)
        v, log_q = self.posterior.sample(xm, rng)
        self._check_support(v, xm)
        return self.flow.log_prob(v) - log_q

    def _check_support(self, v, xm):
        vv = ad.value(v)
        if self.posterior_kind in ARGMAX_KINDS:
            ok = np.all(sj.argmax_map(vv) == xm)
        else:
            ok = np.array_equal(np.floor(vv), sj.onehot_mask(xm, self.model_K, vv.dtype))
        if not ok:
            raise sj.SupportViolation(f"{self.posterior_kind} posterior produced v outside the region of x")
        if not np.all(np.isfinite(vv)):
            raise sj.SupportViolation("non-finite posterior sample")

    def iwbo(self, x, S: int, rng: np.random.Generator, chunk: int = 20000) -> np.ndarray:
        """log (1/S) sum_s p(v_s) / q(v_s | x) per datum, with S posterior samples."""
        if S < 1:
            raise ValueError("S must be >= 1")
        x = np.asarray(x)
        B = len(x)
        per = max(1, chunk // max(B, 1))
        draws = []
        done = 0
        while done < S:
            s = min(per, S - done)
            rep = np.tile(x, (s, 1))
            draws.append(np.asarray(ad.value(self.elbo(rep, rng)), dtype=np.float64).reshape(s, B))
            done += s
        return _log_mean_exp(np.concatenate(draws, axis=0), axis=0)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        out = self._sample_raw(n, rng)
        if not self.base:
            return out
        x, bad = sj.cartesian_decode(out, self.K, self.base)
        for _ in range(self.max_resample):
            rows = bad.any(axis=1)
            if not rows.any():
                return x
            fresh, fresh_bad = sj.cartesian_decode(self._sample_raw(int(rows.sum()), rng), self.K, self.base)
            x[rows], bad[rows] = fresh, fresh_bad
        if bad.any():
            raise sj.OutOfAlphabet(f"{int(bad.any(axis=1).sum())} samples still out of alphabet after {self.max_resample} redraws")
        return x

    def _sample_raw(self, n, rng):
        v = self.flow.sample(n, rng).reshape(n, self.model_D, self.model_K)
        return sj.argmax_map(v)


def argmax_flow_elbo(x, model: ArgmaxFlow, rng: np.random.Generator):
    return model.elbo(x, rng)


def iwbo(x, model: ArgmaxFlow, S: int, rng: np.random.Generator):
    return model.iwbo(x, S, rng)
