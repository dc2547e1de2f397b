import math

import numpy as np
import pytest
from scipy import stats

from catgen import autodiff as ad
from catgen import density as dn
from catgen import oracles
from catgen import surjections as sj
from catgen.verify import _gradient_cases


def perturbed_flow(dim, seed=0, n_layers=3, scale=0.3):
    flow = dn.FlowModel.coupling(dim, n_layers=n_layers, hidden=16, depth=2, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in flow.parameters():
        p.value = p.value + scale * rng.normal(size=p.shape)
    return flow


@pytest.mark.parametrize("dim", [2, 3, 6])
def test_flow_invertible_and_logdet_antisymmetric(dim, rng):
    flow = perturbed_flow(dim)
    v = rng.normal(size=(64, dim))
    z, log_det = flow.forward(v)
    z = ad.value(z)
    assert np.abs(flow.inverse(z) - v).max() <= 1e-6
    # log|det| of the inverse map, by finite-difference Jacobians of inverse()
    h = 1e-6
    for i in range(4):
        J = np.stack([(flow.inverse(z[i : i + 1] + h * e) - flow.inverse(z[i : i + 1] - h * e))[0] / (2 * h)
                      for e in np.eye(dim)], axis=1)
        inv_logdet = np.linalg.slogdet(J)[1]
        assert abs(inv_logdet + ad.value(log_det)[i]) <= 1e-6


def test_layer_logdets_match_jacobians(rng):
    dim = 4
    for layer in (dn.LULinear(dim, rng), dn.AffineCoupling(dim, 8, 1, rng, flip=True)):
        for p in layer.parameters():
            p.value = p.value + 0.3 * rng.normal(size=p.shape)
        v = rng.normal(size=(1, dim))
        h = 1e-6
        J = np.stack([(ad.value(layer.forward(v + h * e)[0]) - ad.value(layer.forward(v - h * e)[0]))[0] / (2 * h)
                      for e in np.eye(dim)], axis=1)
        assert ad.value(layer.forward(v)[1])[0] == pytest.approx(np.linalg.slogdet(J)[1], abs=1e-6)


def test_identity_flow_is_standard_normal(rng):
    flow = dn.FlowModel.coupling(3, n_layers=2, hidden=8, seed=1, lu_init="identity")
    v = rng.normal(size=(50, 3))
    expect = stats.multivariate_normal(np.zeros(3), np.eye(3)).logpdf(v)
    np.testing.assert_allclose(ad.value(flow.log_prob(v)), expect, atol=1e-12)
    # random-orthogonal LU init leaves a standard normal unchanged as well
    ortho = dn.FlowModel.coupling(3, n_layers=2, hidden=8, seed=1)
    np.testing.assert_allclose(ad.value(ortho.log_prob(v)), expect, atol=1e-10)


def test_affine_flow_log_prob():
    mean, log_std = np.array([1.0, -2.0]), np.array([0.5, -0.3])
    flow = dn.FlowModel.gaussian(mean, log_std)
    v = np.array([[0.3, 0.1], [2.0, -2.5]])
    expect = stats.norm(mean, np.exp(log_std)).logpdf(v).sum(axis=1)
    np.testing.assert_allclose(ad.value(flow.log_prob(v)), expect, atol=1e-12)
    # (B, D, K) input is flattened
    np.testing.assert_allclose(ad.value(flow.log_prob(v.reshape(2, 1, 2))), expect, atol=1e-12)


def test_2d_density_normalizes():
    flow = perturbed_flow(2, seed=3, scale=0.1)
    grid = np.linspace(-12, 12, 801)
    g0, g1 = np.meshgrid(grid, grid, indexing="ij")
    dens = np.exp(ad.value(flow.log_prob(np.stack([g0.ravel(), g1.ravel()], 1)))).reshape(g0.shape)
    total = np.trapezoid(np.trapezoid(dens, grid, axis=1), grid)
    assert abs(total - 1.0) < 1e-2


def test_sample_moments(rng):
    mean, log_std = np.array([1.0, -2.0]), np.array([0.5, -0.3])
    flow = dn.FlowModel.gaussian(mean, log_std)
    s = flow.sample(100000, rng)
    np.testing.assert_allclose(s.mean(0), mean, atol=4 * np.exp(log_std).max() / math.sqrt(1e5))
    np.testing.assert_allclose(s.std(0), np.exp(log_std), rtol=0.02)


def test_flow_samples_follow_log_prob(rng):
    flow = perturbed_flow(2, seed=5)
    s = flow.sample(20000, rng)
    # the mean log-density of own samples estimates minus the entropy; a shifted copy scores lower
    own = ad.value(flow.log_prob(s)).mean()
    assert own > ad.value(flow.log_prob(s + 1.0)).mean()


@pytest.mark.parametrize("kind", ["softplus", "gumbel", "gumbel-threshold"])
def test_elbo_bounded_by_symmetric_log_half(kind, rng):
    model = dn.ArgmaxFlow(1, 2, kind, flow=dn.FlowModel.gaussian([0.0, 0.0]))
    model.initialize(np.array([[0], [1]]))
    e = ad.value(model.elbo(np.zeros((20000, 1), dtype=int), rng))
    se = e.std() / math.sqrt(len(e))
    assert e.mean() <= math.log(0.5) + 3 * se


def test_analytic_bound_gumbel(rng):
    exact = oracles.gaussian_orthant_log_prob((1.0, 0.0))
    assert exact == pytest.approx(math.log(stats.norm.cdf(1 / math.sqrt(2))), abs=1e-12)
    model = dn.ArgmaxFlow(1, 2, "gumbel", flow=dn.FlowModel.gaussian([1.0, 0.0]))
    e = ad.value(model.elbo(np.zeros((20000, 1), dtype=int), rng))
    assert e.mean() <= exact + 3 * e.std() / math.sqrt(len(e))
    iw = model.iwbo(np.zeros((100, 1), dtype=int), 1000, rng)
    assert abs(iw.mean() - exact) < 0.02


def test_iwbo_tightens_with_samples(rng):
    model = dn.ArgmaxFlow(2, 3, "gumbel", n_layers=1, hidden=8, seed=0)
    model.initialize(rng.integers(0, 3, (50, 2)))
    x = np.tile(rng.integers(0, 3, (1, 2)), (200, 1))
    means = [model.iwbo(x, S, rng).mean() for S in (1, 5, 25, 125)]
    for lo, hi in zip(means, means[1:]):
        assert hi >= lo - 0.01
    assert means[-1] > means[0]
    elbo = ad.value(model.elbo(x, rng)).mean()
    assert means[-1] >= elbo


def test_iwbo_s1_equals_elbo_draw():
    model = dn.ArgmaxFlow(2, 3, "softplus", n_layers=1, hidden=8, seed=0)
    x = np.array([[0, 2], [1, 1]])
    a = model.iwbo(x, 1, np.random.default_rng(4))
    b = ad.value(model.elbo(x, np.random.default_rng(4)))
    np.testing.assert_allclose(a, b, atol=1e-12)
    with pytest.raises(ValueError):
        model.iwbo(x, 0, np.random.default_rng(0))


def test_support_violation_raised():
    class Bad:
        def sample(self, x, rng):
            v = np.zeros((len(x), 1, 2))
            v[:, 0, 1] = 1.0  # argmax is always 1
            return v, np.zeros(len(x))

    model = dn.ArgmaxFlow(1, 2, "gumbel", posterior_model=Bad())
    with pytest.raises(sj.SupportViolation):
        model.elbo(np.zeros((3, 1), dtype=int), np.random.default_rng(0))


@pytest.mark.parametrize("kind", dn.POSTERIOR_KINDS)
def test_every_posterior_gives_finite_elbo_and_samples(kind, rng):
    model = dn.ArgmaxFlow(3, 4, kind, n_layers=1, hidden=8, seed=0)
    x = rng.integers(0, 4, (32, 3))
    model.initialize(x)
    assert np.all(np.isfinite(ad.value(model.elbo(x, rng))))
    s = model.sample(10, rng)
    assert s.shape == (10, 3) and s.min() >= 0 and s.max() < 4


def test_cartesian_model_samples_stay_in_alphabet(rng):
    model = dn.ArgmaxFlow(2, 5, "gumbel", base=2, n_layers=1, hidden=8, seed=0)
    assert model.model_D == 6 and model.model_K == 2
    s = model.sample(200, rng)
    assert s.max() < 5
    assert np.all(np.isfinite(ad.value(model.elbo(rng.integers(0, 5, (8, 2)), rng))))


def test_make_posterior_rejects_unknown():
    with pytest.raises(ValueError):
        dn.make_posterior("nope", 2, 2)


@pytest.mark.parametrize("case", range(len(_gradient_cases(np.random.default_rng(0)))))
def test_gradients(case):
    name, params, fn = _gradient_cases(np.random.default_rng(0))[case]
    assert oracles.gradient_check(fn, params, max_entries=25, rng=np.random.default_rng(1)) < 1e-4, name
