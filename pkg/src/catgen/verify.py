"""Oracle check suite behind ``catgen verify``.

Each check compares a closed-form implementation with a brute-force reference
from :mod:`catgen.oracles` and reports the worst discrepancy it saw.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import density as dn
from . import diffusion as df
from . import oracles
from . import surjections as sj
from .nn import MLP, ConditionalGaussian, Linear, SigmoidGaussian
from .numerics import index_to_log_onehot
from .schedule import build_schedule


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    passed: bool
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{status}  {self.name:<28} max_err={self.max_error:.3e}  tol={self.tolerance:.1e}  ({self.seconds:.2f}s){extra}"


def _schedules(rng, Ts, n_random):
    """Cosine schedules at the default offset plus ``n_random`` random offsets per T."""
    for T in Ts:
        for s in [0.008] + list(rng.uniform(0.001, 0.2, n_random)):
            yield build_schedule(T, float(s))


def check_kernel_composition(quick: bool, rng) -> tuple[float, str]:
    worst = 0.0
    for K in (2, 3, 4):
        for sched in _schedules(rng, (2, 4, 8), 1 if quick else 3):
            ab = sched.alpha_bar
            for x0 in range(K):
                log_x0 = index_to_log_onehot(np.array([[x0]]), K)
                for t in range(0, sched.T + 1):
                    ours = np.exp(df.q_marginal(sched, log_x0, t))[0, 0]
                    ref = oracles.composed_marginal(x0, t, ab, K)
                    worst = max(worst, np.abs(ours - ref).max())
                    if t >= 1:
                        one = np.exp(df.q_forward_one_step(sched, log_x0, t))[0, 0]
                        ref1 = oracles.transition_matrix(oracles.step_alphas(ab)[t], K)[x0]
                        worst = max(worst, np.abs(one - ref1).max())
    return worst, ""


def check_posterior_bayes(quick: bool, rng) -> tuple[float, str]:
    worst = 0.0
    delta_exact = True
    for K in (2, 3, 4):
        for sched in _schedules(rng, (1, 2, 4, 8), 1 if quick else 2):
            ab = sched.alpha_bar
            pairs = np.array([(a, b) for a in range(K) for b in range(K)])
            log_x0 = index_to_log_onehot(pairs[:, :1], K)
            log_xt = index_to_log_onehot(pairs[:, 1:], K)
            for t in range(1, sched.T + 1):
                ours = np.exp(df.q_posterior(sched, log_x0, log_xt, t))[:, 0]
                ref = np.stack([oracles.bayes_posterior(a, b, t, ab, K) for a, b in pairs])
                worst = max(worst, np.abs(ours - ref).max())
                if t == 1:
                    delta_exact &= bool(np.array_equal(df.q_posterior(sched, log_x0, log_xt, 1), log_x0))
    return (worst if delta_exact else math.inf), ("t=1 returns x0 exactly" if delta_exact else "t=1 branch differs from x0")


def check_exact_likelihood(quick: bool, rng) -> tuple[float, str]:
    """Full ELBO <= log P(x0) from trajectory enumeration; error = worst positive gap."""
    worst_violation = -math.inf
    for seed in range(3 if quick else 10):
        for K, D, T in ((2, 1, 3), (3, 1, 3), (2, 2, 3)):
            model = df.DiffusionModel(D, K, T=T, hidden=16, depth=1, seed=seed, zero_out=False)
            x0 = np.array(list(np.ndindex(*(K,) * D)), dtype=np.int64).reshape(-1, D)

            def reverse(states, t, model=model):
                return np.exp(ad.value(model.p_pred(model.log_onehot(states), t)))

            exact = oracles.exact_log_likelihood(reverse, T, K, D)
            bound = model.elbo(x0, mode="full", enumerate_states=True)
            worst_violation = max(worst_violation, float(np.max(bound - exact)))
    return max(worst_violation, 0.0), f"max(ELBO - logP) = {worst_violation:.3e}"


def check_argmax_constraint(quick: bool, rng) -> tuple[float, str]:
    n = 2000 if quick else 10000
    D, K = 3, 5
    x = rng.integers(0, K, size=(n, D))
    phi = rng.normal(0, 2, size=(D, K))
    noise = ConditionalGaussian(D, K)
    noise.mean.value = rng.normal(0, 2, size=(D, K, K))
    sig = SigmoidGaussian(D, K)
    sig.base.mean.value = rng.normal(0, 2, size=(D, K, K))
    samplers = {
        "softplus": lambda: sj.threshold_posterior_sample(x, noise, rng),
        "gumbel": lambda: sj.gumbel_posterior_sample(x, phi, rng),
        "gumbel-threshold": lambda: sj.gumbel_threshold_posterior(x, phi, sig, rng),
    }
    bad = 0
    for name, draw in samplers.items():
        v, log_q = draw()
        v, log_q = ad.value(v), ad.value(log_q)
        bad += int(np.sum(sj.argmax_map(v) != x)) + int(np.sum(~np.isfinite(log_q)))
    return float(bad), f"{bad} violations / non-finite log q over {3 * n} samples"


def check_gumbel_laws(quick: bool, rng) -> tuple[float, str]:
    n = 20000 if quick else 100000
    K = 6
    phi = rng.normal(0, 1, size=K)
    g = sj.gumbel_sample(np.broadcast_to(phi, (n, K)), rng)
    freq = np.bincount(np.argmax(g, axis=1), minlength=K) / n
    p = np.exp(phi - np.logaddexp.reduce(phi))
    z = np.max(np.abs(freq - p) / np.sqrt(p * (1 - p) / n))
    pval = oracles.gumbel_max_ks(g.max(axis=1), float(np.logaddexp.reduce(phi)))
    # error in units of 4 sigma; KS failure maps to infinity
    err = z / 4.0 if pval > 0.01 else math.inf
    return err, f"max z = {z:.2f}, KS p = {pval:.3f}"


def check_analytic_bound(quick: bool, rng) -> tuple[float, str]:
    """Gumbel posterior under a fixed N((1,0), I): ELBO below log Phi(1/sqrt 2), IWBO close to it."""
    exact = oracles.gaussian_orthant_log_prob((1.0, 0.0))
    model = dn.ArgmaxFlow(1, 2, "gumbel", flow=dn.FlowModel.gaussian([1.0, 0.0]))
    e = np.asarray(ad.value(model.elbo(np.zeros((10000, 1), dtype=np.int64), rng)))
    se = e.std(ddof=1) / math.sqrt(len(e))
    reps = 50 if quick else 200
    iw = model.iwbo(np.zeros((reps, 1), dtype=np.int64), 1000, rng)
    elbo_excess = e.mean() - (exact + 3 * se)
    err = abs(iw.mean() - exact)
    if elbo_excess > 0:
        err = math.inf
    return err, f"ELBO {e.mean():.4f} (+-{se:.4f}), IWBO {iw.mean():.4f}, exact {exact:.4f}"


def _gradient_cases(rng):
    """(name, params, loss_fn) for every trainable block."""
    cases = []
    x2 = rng.normal(size=(4, 3))

    lin = Linear(3, 2, rng)
    cases.append(("Linear", lin.parameters(), lambda: ad.sum_(ad.square(lin(x2)))))
    mlp = MLP(3, 5, 2, 2, rng, zero_out=False)
    cases.append(("MLP", mlp.parameters(), lambda: ad.sum_(ad.tanh(mlp(x2)))))

    lu = dn.LULinear(3, rng)
    cases.append(("LULinear", lu.parameters(), lambda: ad.sum_(ad.square(lu.forward(x2)[0])) + ad.sum_(lu.forward(x2)[1])))
    cp = dn.AffineCoupling(3, 4, 1, rng)
    for p in cp.parameters():
        p.value = p.value + 0.3 * rng.normal(size=p.shape)
    cases.append(("AffineCoupling", cp.parameters(), lambda: ad.sum_(ad.square(cp.forward(x2)[0])) + ad.sum_(cp.forward(x2)[1])))

    dm = df.DiffusionModel(2, 3, T=5, hidden=8, depth=1, seed=1, zero_out=False)
    xd = rng.integers(0, 3, size=(4, 2))

    def diff_loss():
        r = np.random.default_rng(7)
        return ad.mean(dm.training_loss(xd, r, importance=False)[0])

    cases.append(("Denoiser/diffusion loss", dm.parameters(), diff_loss))

    xf = rng.integers(0, 3, size=(3, 2))
    for kind in dn.POSTERIOR_KINDS:
        m = dn.ArgmaxFlow(2, 3, kind, n_layers=1, hidden=4, depth=1, seed=2)
        for p in m.parameters():
            p.value = p.value + 0.1 * rng.normal(size=p.shape)

        def flow_loss(m=m):
            return -ad.mean(m.elbo(xf, np.random.default_rng(3)))

        cases.append((f"ArgmaxFlow[{kind}]", m.parameters(), flow_loss))
    return cases


def check_gradients(quick: bool, rng) -> tuple[float, str]:
    worst, worst_name = 0.0, ""
    for name, params, fn in _gradient_cases(rng):
        err = oracles.gradient_check(fn, params, max_entries=6 if quick else 40, rng=rng)
        if err > worst:
            worst, worst_name = err, name
    return worst, f"worst block: {worst_name}"


def check_schedule_numerics(quick: bool, rng) -> tuple[float, str]:
    bad = 0
    for T in (1, 10, 100, 1000, 4000):
        for arr in build_schedule(T).arrays().values():
            bad += int(np.sum(~np.isfinite(arr)))
    return float(bad), f"{bad} non-finite schedule entries"


def check_cartesian(quick: bool, rng) -> tuple[float, str]:
    bad = 0
    for K, M in ((27, 3), (27, 2), (256, 2), (256, 6), (256, 10), (5, 2)):
        x = rng.integers(0, K, size=(50, 4))
        back, oob = sj.cartesian_decode(sj.cartesian_encode(x, K, M), K, M)
        bad += int(np.sum(back != x)) + int(oob.sum())
    bad += int(sj.cartesian_digits(256, 2) != 8) + int(sj.cartesian_digits(27, 2) != 5)
    return float(bad), f"{bad} roundtrip mismatches"


CHECKS = [
    ("kernel_composition", check_kernel_composition, 1e-10),
    ("posterior_bayes", check_posterior_bayes, 1e-10),
    ("exact_likelihood_bound", check_exact_likelihood, 1e-9),
    ("argmax_constraint", check_argmax_constraint, 0.0),
    ("gumbel_laws", check_gumbel_laws, 1.0),
    ("analytic_argmax_bound", check_analytic_bound, 0.02),
    ("gradients", check_gradients, 1e-4),
    ("schedule_numerics", check_schedule_numerics, 0.0),
    ("cartesian_roundtrip", check_cartesian, 0.0),
]


def run_checks(quick: bool = False, seed: int = 0, names=None) -> list[CheckResult]:
    results = []
    for name, fn, tol in CHECKS:
        if names and name not in names:
            continue
        rng = np.random.default_rng(seed)
        start = time.perf_counter()
        err, detail = fn(quick, rng)
        passed = bool(err <= tol) if tol > 0 else bool(err == 0)
        results.append(CheckResult(name, float(err), tol, passed, time.perf_counter() - start, detail))
    return results
