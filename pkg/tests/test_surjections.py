import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from catgen import autodiff as ad
from catgen import oracles
from catgen import surjections as sj
from catgen.nn import ConditionalGaussian, SigmoidGaussian, UniformNoise


def test_argmax_examples():
    assert sj.argmax_map(np.array([[[0.1, 2.0, -1.0]]]))[0, 0] == 1
    assert sj.argmax_map(np.array([[[1.0, 1.0, 0.0]]]))[0, 0] == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 7), st.integers(0, 2**31 - 1))
def test_argmax_permutation_equivariant(K, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(5, 3, K))
    perm = rng.permutation(K)
    inv = np.argsort(perm)
    # permuting the coordinates relabels the argmax accordingly
    assert np.array_equal(sj.argmax_map(v[..., perm]), inv[sj.argmax_map(v)])


def test_softplus_threshold_examples():
    v, log_det = sj.softplus_threshold(np.array(0.0), 0.0)
    assert float(v) == pytest.approx(-math.log(2), abs=1e-12)
    assert float(log_det) == pytest.approx(math.log(0.5), abs=1e-12)
    v, _ = sj.softplus_threshold(np.array(-50.0), 0.0)
    assert float(v) == pytest.approx(-50.0, abs=1e-12)
    # far above the threshold the output saturates at T
    v, _ = sj.softplus_threshold(np.array(50.0), 1.0)
    assert float(v) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-30, 30), st.floats(-10, 10))
def test_softplus_threshold_roundtrip_and_bound(u, T):
    v, log_det = sj.softplus_threshold(np.array(u), T)
    v = float(v)
    assert v < T or math.isclose(v, T, abs_tol=1e-12)
    # the inverse is well conditioned while v stays visibly below T
    if u - T < 8:
        assert sj.softplus_threshold_inverse(v, T) == pytest.approx(u, abs=1e-9 * max(1.0, abs(u)))
    h = 1e-6
    fd = (float(sj.softplus_threshold(np.array(u + h), T)[0]) - float(sj.softplus_threshold(np.array(u - h), T)[0])) / (2 * h)
    if fd > 1e-6:
        assert float(log_det) == pytest.approx(math.log(fd), abs=1e-5)


def test_threshold_density_integrates_to_one_k2():
    # q(u|x=0) standard normal; v0 = u0, v1 = T(u1; u0)
    def log_q(v0, v1):
        ok = v1 < v0
        y = np.where(ok, v0 - v1, 1.0)
        u1 = v0 - np.log(np.expm1(y))
        # du1/dv1 = 1 / sigmoid(v0 - u1)
        log_jac = -np.log(1.0 / (1.0 + np.exp(-(v0 - u1))))
        lp = stats.norm.logpdf(v0) + stats.norm.logpdf(u1) + log_jac
        return np.where(ok, lp, -np.inf)

    total, _ = integrate.dblquad(lambda v1, v0: np.exp(log_q(np.array(v0), np.array(v1))),
                                 -12, 12, lambda v0: v0 - 40, lambda v0: v0)
    assert total == pytest.approx(1.0, abs=1e-4)


def test_gumbel_sample_mean(rng):
    g = np.asarray(sj.gumbel_sample(np.zeros(200000), rng))
    assert g.mean() == pytest.approx(sj.EULER_GAMMA, abs=0.02)


def test_trunc_gumbel_below_threshold(rng):
    T = np.full(100000, 0.3)
    g = np.asarray(sj.trunc_gumbel_sample(np.full(100000, 2.0), T, rng))
    assert np.all(g < 0.3)


@pytest.mark.parametrize("phi,T", [(0.0, 1.0), (1.5, -0.5), (-2.0, 2.0)])
def test_trunc_gumbel_density_matches_empirical_cdf(phi, T, rng):
    n = 400000
    g = np.asarray(sj.trunc_gumbel_sample(np.full(n, phi), np.full(n, T), rng))
    h = 0.05
    grid = np.linspace(np.quantile(g, 0.05), min(np.quantile(g, 0.9), T - 2 * h), 8)
    emp = np.array([np.mean((g > a - h) & (g < a + h)) / (2 * h) for a in grid])
    dens = np.exp(np.asarray(sj.trunc_gumbel_log_prob(grid, phi, np.full_like(grid, T))))
    np.testing.assert_allclose(emp, dens, rtol=0.05, atol=0.01)
    # and the density integrates to one below T
    xs = np.linspace(T - 40, T - 1e-9, 200001)
    assert np.trapezoid(np.exp(np.asarray(sj.trunc_gumbel_log_prob(xs, phi, np.full_like(xs, T)))), xs) == pytest.approx(1.0, abs=1e-4)


def _posteriors(D, K, rng):
    phi = rng.normal(size=(D, K))
    cg = ConditionalGaussian(D, K)
    cg.mean.value = rng.normal(size=(D, K, K))
    sig = SigmoidGaussian(D, K)
    return {
        "softplus": lambda x: sj.threshold_posterior_sample(x, cg, rng),
        "gumbel": lambda x: sj.gumbel_posterior_sample(x, phi, rng),
        "gumbel-threshold": lambda x: sj.gumbel_threshold_posterior(x, phi, sig, rng),
    }


@pytest.mark.parametrize("kind", ["softplus", "gumbel", "gumbel-threshold"])
def test_argmax_constraint_holds(kind, rng):
    D, K = 3, 5
    sampler = _posteriors(D, K, rng)[kind]
    x = rng.integers(0, K, (10000, D))
    v, log_q = sampler(x)
    assert np.array_equal(sj.argmax_map(v), x)
    assert np.all(np.isfinite(ad.value(log_q)))


def test_gumbel_posterior_laws(rng):
    K, n = 4, 100000
    phi = np.array([[0.3, -1.0, 1.2, 0.0]])
    x = np.zeros((n, 1), dtype=int)
    v, _ = sj.gumbel_posterior_sample(x, phi, rng)
    v = np.asarray(v)
    lse = float(np.log(np.exp(phi).sum()))
    top = v[:, 0, 0]
    # the maximum of Gumbels is Gumbel at log-sum-exp of the locations
    assert abs(top.mean() - (lse + sj.EULER_GAMMA)) < 4 * (math.pi / math.sqrt(6)) / math.sqrt(n)
    assert oracles.gumbel_max_ks(top, lse) > 0.01
    # the same law as the max of unconditioned Gumbels
    free = np.asarray(sj.gumbel_sample(np.broadcast_to(phi, (n, K)), rng)).max(axis=1)
    assert stats.ks_2samp(top, free).pvalue > 0.01


def test_gumbel_posterior_log_prob_matches_sampler(rng):
    phi = rng.normal(size=(2, 3))
    x = rng.integers(0, 3, (50, 2))
    v, log_q = sj.gumbel_posterior_sample(x, phi, rng)
    np.testing.assert_allclose(ad.value(sj.gumbel_posterior_log_prob(v, x, phi)), ad.value(log_q), atol=1e-12)
    bad = np.array(ad.value(v))
    bad[0, 0, (x[0, 0] + 1) % 3] = bad[0, 0, x[0, 0]] + 1.0
    with pytest.raises(sj.SupportViolation):
        sj.gumbel_posterior_log_prob(bad, x, phi)


def test_gumbel_density_integrates_to_one_k2():
    phi = np.array([0.4, -0.7])

    def log_q(v0, v1):
        v = np.stack([v0.ravel(), v1.ravel()], -1)[:, None, :]
        out = np.full(v.shape[0], -np.inf)
        ok = v[:, 0, 1] < v[:, 0, 0]
        x = np.zeros((ok.sum(), 1), dtype=int)
        out[ok] = ad.value(sj.gumbel_posterior_log_prob(v[ok], x, phi[None, :]))
        return out.reshape(v0.shape)

    def dens(v1, v0):
        v = np.array([[[v0, v1]]])
        return float(np.exp(ad.value(sj.gumbel_posterior_log_prob(v, np.zeros((1, 1), dtype=int), phi[None, :]))[0]))

    total, _ = integrate.dblquad(dens, -8, 20, lambda v0: v0 - 30, lambda v0: v0)
    assert total == pytest.approx(1.0, abs=1e-4)
    # the plain grid rule agrees up to its discretisation error at the boundary
    assert oracles.threshold_density_quadrature(log_q, lo=-8, hi=14, n=1201) == pytest.approx(1.0, abs=5e-3)


def test_init_gumbel_locations():
    x = np.array([0, 0, 0, 1])
    phi = sj.init_gumbel_locations(x, 2)
    np.testing.assert_allclose(np.exp(phi[0]), [4 / 6, 2 / 6], atol=1e-12)
    with pytest.raises(ValueError):
        sj.init_gumbel_locations(np.zeros((0, 2), dtype=int), 3)


def test_gumbel_threshold_with_uniform_noise_is_gumbel():
    D, K = 3, 4
    phi = np.random.default_rng(1).normal(size=(D, K))
    x = np.random.default_rng(2).integers(0, K, (200, D))
    v1, lq1 = sj.gumbel_posterior_sample(x, phi, np.random.default_rng(5))
    v2, lq2 = sj.gumbel_threshold_posterior(x, phi, UniformNoise(D, K, eps=sj.UNIFORM_EPS), np.random.default_rng(5))
    np.testing.assert_allclose(ad.value(v2), ad.value(v1), atol=1e-12)
    np.testing.assert_allclose(ad.value(lq2), ad.value(lq1), atol=1e-8)


def test_dequantization(rng):
    x = rng.integers(0, 5, (100, 4))
    v, log_q = sj.uniform_dequantize(x, 5, rng)
    assert np.array_equal(np.floor(v), sj.onehot_mask(x, 5))
    assert np.all(log_q == 0)
    assert np.array_equal(sj.floor_map(v), x)
    vv, lq = sj.variational_dequantize(x, 5, SigmoidGaussian(4, 5), rng)
    assert np.array_equal(np.floor(ad.value(vv)), sj.onehot_mask(x, 5))
    assert np.all(np.isfinite(ad.value(lq)))


@pytest.mark.parametrize("K,M,d", [(256, 2, 8), (27, 2, 5), (10, 10, 1), (9, 3, 2), (10, 3, 3), (2, 2, 1)])
def test_cartesian_digits(K, M, d):
    assert sj.cartesian_digits(K, M) == d


@pytest.mark.parametrize("M", [2, 3, 6, 10])
def test_cartesian_roundtrip(M, rng):
    K = 27
    x = rng.integers(0, K, (300, 5))
    digits = sj.cartesian_encode(x, K, M)
    assert digits.shape == (300, 5 * sj.cartesian_digits(K, M))
    assert digits.max() < M
    back, bad = sj.cartesian_decode(digits, K, M)
    assert np.array_equal(back, x) and not bad.any()


def test_cartesian_out_of_alphabet_and_errors():
    _, bad = sj.cartesian_decode(np.array([[1, 1, 1, 1, 1]]), 27, 2)
    assert bad[0, 0]
    with pytest.raises(ValueError):
        sj.cartesian_encode(np.array([[27]]), 27, 2)
    with pytest.raises(ValueError):
        sj.cartesian_digits(5, 1)
    with pytest.raises(ValueError):
        sj.cartesian_decode(np.zeros((1, 4), dtype=int), 27, 2)


def test_threshold_gradients_reach_noise_model(rng):
    D, K = 2, 3
    cg = ConditionalGaussian(D, K)
    cg.mean.value = rng.normal(size=(D, K, K))
    x = rng.integers(0, K, (6, D))
    seed = 7

    def loss():
        v, log_q = sj.threshold_posterior_sample(x, cg, np.random.default_rng(seed))
        return ad.sum_(v * v) + ad.sum_(log_q)

    assert oracles.gradient_check(loss, [cg.mean, cg.log_std]) < 1e-5
