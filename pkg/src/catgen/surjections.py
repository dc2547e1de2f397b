"""The argmax surjection, its probabilistic inverses, and rounding baselines.

All samplers return ``(v, log_q)`` where ``v`` has shape (B, D, K) and
``log_q`` is ``log q(v | x)`` summed over dimensions (shape (B,)). They are
written with autodiff ops so gradients reach any learned noise model or Gumbel
locations; with plain-array inputs they return plain arrays.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .nn import UniformNoise

UNIFORM_EPS = 1e-10
EULER_GAMMA = 0.5772156649015329


class SupportViolation(AssertionError):
    """A posterior sample fell outside the argmax region of its datum."""


class OutOfAlphabet(ValueError):
    pass


def argmax_map(v) -> np.ndarray:
    """x_d = argmax_k v_dk, lowest index on ties."""
    return np.argmax(ad.value(v), axis=-1)


def onehot_mask(x, K: int, dtype=np.float64) -> np.ndarray:
    return np.eye(K, dtype=dtype)[np.asarray(x)]


def _take_class(v, x):
    """v[b, d, x[b, d]] repeated along a trailing axis of size K: shape (B, D, K)."""
    x = np.asarray(x)
    K = ad.value(v).shape[-1]
    index = np.repeat(x[..., None], K, axis=-1)
    return ad.gather(v, index, axis=-1)


# ---------------------------------------------------------------------------
# Thresholding


def softplus_threshold(u, T):
    """Map ``u`` below ``T``: ``v = T - softplus(T - u)``.

    Returns ``(v, log_det)`` with ``log_det = log dv/du = log sigmoid(T - u)``.
    """
    diff = T - u
    v = T - ad.softplus(diff)
    log_det = ad.log_sigmoid(diff)
    return v, log_det


def softplus_threshold_inverse(v, T):
    """Inverse of :func:`softplus_threshold` for ``v < T``: ``u = T - log(expm1(T - v))``."""
    v = np.asarray(v, dtype=np.float64)
    y = T - v
    # log(expm1(y)), stable for large y
    return T - np.where(y > 30, y + np.log1p(-np.exp(-y)), np.log(np.expm1(y)))


def threshold_posterior_sample(x, noise_model, rng: np.random.Generator):
    """Thresholding inverse: v_x = u_x, v_{-x} = threshold(u_{-x}, T=u_x).

    ``noise_model.sample(x, rng)`` must return ``(u, log q(u|x))``.
    """
    x = np.asarray(x)
    u, log_qu = noise_model.sample(x, rng)
    K = ad.value(u).shape[-1]
    mask = onehot_mask(x, K, ad.value(u).dtype)
    T = _take_class(u, x)
    v_thr, log_det = softplus_threshold(u, T)
    v = mask * u + (1.0 - mask) * v_thr
    log_q = log_qu - ad.sum_((1.0 - mask) * log_det, axis=(1, 2))
    return v, log_q


# ---------------------------------------------------------------------------
# Gumbel machinery


def gumbel_log_prob(g, phi):
    """log Gumbel(g | phi) = phi - g - exp(phi - g)."""
    d = phi - g
    return d - ad.exp(d)


def trunc_gumbel_log_prob(g, phi, T):
    """log TruncGumbel(g | phi, T) = phi - g - exp(phi - g) + exp(phi - T) if g < T, else -inf."""
    out = gumbel_log_prob(g, phi) + ad.exp(phi - T)
    below = np.asarray(ad.value(g) < ad.value(T))
    if below.all():
        return out
    return out + np.where(below, 0.0, -np.inf)


def gumbel_inverse_cdf(u, phi):
    """g = phi - log(-log u)."""
    return phi - ad.log(-ad.log(u))


def trunc_gumbel_inverse_cdf(u, phi, T):
    """g = phi - log(exp(phi - T) - log u), evaluated as phi - logaddexp(phi - T, log(-log u))."""
    return phi - ad.log_add_exp(phi - T, ad.log(-ad.log(u)))


def gumbel_sample(phi, rng: np.random.Generator, eps: float = UNIFORM_EPS):
    phi = np.asarray(phi, dtype=np.float64)
    u = rng.uniform(eps, 1.0 - eps, size=phi.shape)
    return gumbel_inverse_cdf(u, phi)


def trunc_gumbel_sample(phi, T, rng: np.random.Generator, eps: float = UNIFORM_EPS):
    phi = np.asarray(phi, dtype=np.float64)
    shape = np.broadcast_shapes(phi.shape, np.shape(T))
    u = rng.uniform(eps, 1.0 - eps, size=shape)
    return trunc_gumbel_inverse_cdf(u, phi, T)


def _broadcast_phi(phi, x):
    """Gumbel locations as (B, D, K); accepts (D, K) tables or per-sample (B, D, K)."""
    if ad.value(phi).ndim == 2:
        return ad.broadcast_to(phi, (len(x),) + ad.value(phi).shape)
    return phi


def gumbel_inverse_transform(u, x, phi):
    """Push uniforms through the (truncated) Gumbel inverse CDFs conditioned on argmax = x.

    Coordinate x gets ``Gumbel(logsumexp(phi))`` and every other coordinate a
    Gumbel truncated at that value. Returns ``(v, log|dv/du|)`` with the log
    Jacobian summed per sample.
    """
    x = np.asarray(x)
    phi = _broadcast_phi(phi, x)
    B, D, K = ad.value(phi).shape
    mask = onehot_mask(x, K, ad.value(phi).dtype)
    phi_max = ad.broadcast_to(ad.log_sum_exp(phi, axis=-1, keepdims=True), (B, D, K))
    neg_log_u = -ad.log(u)
    v_top = phi_max - ad.log(neg_log_u)  # (B, D, K), only entry x is used
    T = _take_class(v_top, x)
    v_rest = phi - ad.log_add_exp(phi - T, ad.log(neg_log_u))
    v = mask * v_top + (1.0 - mask) * v_rest
    # top: dv/du = 1 / (u * -log u)
    # rest: v = phi - log(c - log u) with c = exp(phi - T), so dv/du = exp(v - phi) / u
    log_u = ad.log(u)
    log_jac_top = -log_u - ad.log(neg_log_u)
    log_jac_rest = v_rest - phi - log_u
    log_jac = ad.sum_(mask * log_jac_top + (1.0 - mask) * log_jac_rest, axis=(1, 2))
    return v, log_jac


def gumbel_posterior_sample(x, phi, rng: np.random.Generator, eps: float = UNIFORM_EPS):
    """Gumbel inverse: v_x ~ Gumbel(phi_max), v_{-x} ~ TruncGumbel(phi_{-x}, v_x).

    ``log_q`` uses the closed-form Gumbel and truncated-Gumbel log-densities.
    """
    x = np.asarray(x)
    phi_b = _broadcast_phi(phi, x)
    u = rng.uniform(eps, 1.0 - eps, size=ad.value(phi_b).shape)
    v, _ = gumbel_inverse_transform(u, x, phi_b)
    return v, gumbel_posterior_log_prob(v, x, phi_b)


def gumbel_posterior_log_prob(v, x, phi):
    x = np.asarray(x)
    phi = _broadcast_phi(phi, x)
    B, D, K = ad.value(phi).shape
    mask = onehot_mask(x, K, ad.value(phi).dtype)
    phi_max = ad.log_sum_exp(phi, axis=-1)  # (B, D)
    v_top_k = _take_class(v, x)  # (B, D, K) copies of v_x
    v_top = ad.slice_(v_top_k, (slice(None), slice(None), 0))
    lp_top = gumbel_log_prob(v_top, phi_max)  # (B, D)
    # Entry x is excluded by the mask; evaluate it at a harmless point.
    lp_rest = gumbel_log_prob(v, phi) + ad.exp(phi - v_top_k)
    below = (ad.value(v) < ad.value(v_top_k)) | (mask > 0)
    if not below.all():
        raise SupportViolation("sample violates the argmax constraint")
    return ad.sum_(lp_top, axis=1) + ad.sum_((1.0 - mask) * lp_rest, axis=(1, 2))


def init_gumbel_locations(first_batch, K: int, smoothing: float = 1.0) -> np.ndarray:
    """phi[d, k] = log(count + lambda) - log(total + K lambda) from a first minibatch.

    softmax(phi[d]) then matches the (Laplace-smoothed) empirical class
    frequencies of dimension d.
    """
    x = np.asarray(first_batch)
    if x.size == 0:
        raise ValueError("need a non-empty batch to initialise Gumbel locations")
    if x.ndim == 1:
        x = x[:, None]
    D = x.shape[1]
    counts = np.stack([np.bincount(x[:, d], minlength=K) for d in range(D)]).astype(np.float64)
    return np.log(counts + smoothing) - np.log(counts.sum(axis=1, keepdims=True) + K * smoothing)


def gumbel_threshold_posterior(x, phi, noise_model, rng: np.random.Generator):
    """Gumbel thresholding: learned noise on (0, 1)^K through the Gumbel inverse CDFs.

    ``log q(v|x) = log q(u|x) - log|dv/du|``. With :class:`UniformNoise` this is
    exactly :func:`gumbel_posterior_sample` (same draws, same ``v``).
    """
    x = np.asarray(x)
    u, log_qu = noise_model.sample(x, rng)
    v, log_jac = gumbel_inverse_transform(u, x, phi)
    return v, log_qu - log_jac


# ---------------------------------------------------------------------------
# Rounding (dequantization) baselines


def uniform_dequantize(x, K: int, rng: np.random.Generator):
    """v = onehot(x) + u, u ~ U(0,1)^K; floor(v) recovers the one-hot and log q = 0."""
    x = np.asarray(x)
    noise = UniformNoise(x.shape[1], K, eps=0.0)
    u, log_q = noise.sample(x, rng)
    return onehot_mask(x, K) + u, log_q


def variational_dequantize(x, K: int, noise_model, rng: np.random.Generator):
    """v = onehot(x) + u with u from a learned (0, 1)-valued noise model."""
    x = np.asarray(x)
    u, log_q = noise_model.sample(x, rng)
    return onehot_mask(x, K, ad.value(u).dtype) + u, log_q


def floor_map(v) -> np.ndarray:
    """Generative direction of the rounding surjection, read back as class indices.

    ``floor(v)`` is a one-hot for any dequantized sample; for model samples that
    are not one-hot we fall back to the argmax of ``v``.
    """
    return argmax_map(v)


# ---------------------------------------------------------------------------
# Cartesian products


def cartesian_digits(K: int, M: int) -> int:
    """d_m = ceil(log_M K), computed exactly with integers."""
    if M < 2:
        raise ValueError("base M must be at least 2")
    if K < 1:
        raise ValueError("K must be positive")
    d, cap = 1, M
    while cap < K:
        cap *= M
        d += 1
    return d


def cartesian_encode(x, K: int, M: int) -> np.ndarray:
    """Rewrite each base-K symbol as d_m base-M digits, most significant first."""
    x = np.asarray(x)
    if x.size and (x.min() < 0 or x.max() >= K):
        raise ValueError(f"symbols must lie in [0, {K})")
    d = cartesian_digits(K, M)
    powers = M ** np.arange(d - 1, -1, -1)
    digits = (x[..., None] // powers) % M
    return digits.reshape(*x.shape[:-1], x.shape[-1] * d)


def cartesian_decode(digits, K: int, M: int):
    """Inverse of :func:`cartesian_encode`. Returns ``(x, out_of_alphabet)``.

    ``out_of_alphabet`` flags decoded values >= K, which only model samples can
    produce.
    """
    digits = np.asarray(digits)
    d = cartesian_digits(K, M)
    if digits.shape[-1] % d:
        raise ValueError(f"last axis ({digits.shape[-1]}) is not a multiple of {d} digits")
    grouped = digits.reshape(*digits.shape[:-1], digits.shape[-1] // d, d)
    powers = M ** np.arange(d - 1, -1, -1)
    x = (grouped * powers).sum(axis=-1)
    return x, x >= K
