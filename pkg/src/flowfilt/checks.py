"""Acceptance checks shared by ``flowfilt selftest`` and the test suite.

Every check returns a ``CheckResult`` with a one-line detail string; none of
them raises on a numerical failure.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .dirac import ParticleSet, bayes_reweight
from .distance import DistanceParams, distance, gradient, hessian
from .errors import FlowFiltError
from .filter import baseline_sir, gaussian_particles
from .flow import FlowConfig, integrate_flow, j_vector_iterative, j_vector_recursive, weight_dot_iterative, weights_gamma
from .homotopy import flat_likelihood, gaussian_likelihood, user_likelihood
from .reduction import reduce_particles

GRAD_TOL = 1e-5
HESS_TOL = 1e-4
J_TOL = 1e-5
FD_STEP = 1e-6
J_STEP = 1e-3


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def demo_config_path() -> Path:
    return Path(str(resources.files("flowfilt") / "scenarios" / "linear_gaussian.yaml"))


# randomized finite-difference checks

def _rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / scale) if scale > 0 else 0.0


def random_instance(rng):
    """Random approx/reference pair with N in {1,2,3}, L and M in 1..8."""
    n = int(rng.integers(1, 4))
    L = int(rng.integers(1, 9))
    M = int(rng.integers(1, 9))
    wa = rng.uniform(0.1, 1.0, L)
    wr = rng.uniform(0.1, 1.0, M)
    approx = ParticleSet(rng.standard_normal((L, n)), wa / wa.sum())
    ref = ParticleSet(rng.standard_normal((M, n)), wr / wr.sum())
    return approx, ref


def _fd_gradient(approx, ref, params, h):
    x = approx.locations
    out = np.empty(x.size)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        out[i] = (distance(approx.with_locations(xp), ref, params).total
                  - distance(approx.with_locations(xm), ref, params).total) / (2 * h)
    return out


def _fd_hessian(approx, ref, params, h):
    x = approx.locations
    cols = []
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        cols.append((gradient(approx.with_locations(xp), ref, params)
                     - gradient(approx.with_locations(xm), ref, params)) / (2 * h))
    return np.column_stack(cols)


def check_instance(approx, ref, rng, params=DistanceParams(), fault=False):
    """Worst relative errors ``(gradient, hessian, j)`` on one instance."""
    g = gradient(approx, ref, params)
    if fault:
        g = -g
    e_grad = _rel(g, _fd_gradient(approx, ref, params, FD_STEP))
    e_hess = _rel(hessian(approx, ref, params), _fd_hessian(approx, ref, params, FD_STEP))
    # J: gamma-derivative of the gradient as the reference is reweighted
    P = int(rng.integers(1, approx.dim + 1))
    Hm = rng.standard_normal((P, approx.dim))
    lik = gaussian_likelihood(rng.standard_normal(P), lambda x: x @ Hm.T, np.eye(P) * rng.uniform(0.5, 2.0))
    gamma = float(rng.uniform(0.1, 0.9))
    xr = ref.locations

    def grad_at(gm):
        return gradient(approx, ParticleSet(xr, weights_gamma(xr, lik, gm)), params)

    # J can be tiny next to G, so a fourth-order stencil with a wider step
    # keeps the oracle's own roundoff far below the tolerance
    h = J_STEP
    fd = (8 * (grad_at(gamma + h) - grad_at(gamma - h)) - (grad_at(gamma + 2 * h) - grad_at(gamma - 2 * h))) / (12 * h)
    J = j_vector_iterative(approx, xr, weight_dot_iterative(xr, lik, gamma), params)
    e_j = _rel(J, fd)
    return e_grad, e_hess, e_j


def derivative_check(trials: int = 100, seed: int = 0, fault: bool = False):
    """Run ``trials`` random instances; returns worst errors and the first failing instance."""
    worst = [0.0, 0.0, 0.0]
    failure = None
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        approx, ref = random_instance(rng)
        errs = check_instance(approx, ref, rng, fault=fault)
        worst = [max(a, b) for a, b in zip(worst, errs)]
        if failure is None and (errs[0] > GRAD_TOL or errs[1] > HESS_TOL or errs[2] > J_TOL):
            failure = {"instance": t, "seed": seed, "N": approx.dim, "L": approx.size, "M": ref.size,
                       "errors": errs}
    return {"trials": trials, "worst_gradient": worst[0], "worst_hessian": worst[1], "worst_j": worst[2],
            "failure": failure}


# acceptance criteria

def _timed(name, fn):
    t0 = time.perf_counter()
    try:
        passed, detail = fn()
    except FlowFiltError as exc:
        passed, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t0)


def check_derivatives(trials=100, seed=0):
    def run():
        t0 = time.perf_counter()
        rep = derivative_check(trials, seed)
        # the recursive J is the iterative one with the current set as reference
        rng = np.random.default_rng([seed, 10_000])
        e_alg = 0.0
        for _ in range(20):
            x = rng.standard_normal((int(rng.integers(1, 9)), int(rng.integers(1, 4))))
            cur = ParticleSet.equal(x)
            wd = rng.standard_normal(len(x))
            wd -= wd.mean()
            a = j_vector_recursive(cur, wd, DistanceParams())
            b = j_vector_iterative(cur, x, wd, DistanceParams())
            e_alg = max(e_alg, _rel(a, b))
        dt = time.perf_counter() - t0
        ok = rep["failure"] is None and e_alg <= 1e-12 and dt < 30
        return ok, (f"{trials} instances: grad {rep['worst_gradient']:.2e} (<= {GRAD_TOL:g}), "
                    f"hessian {rep['worst_hessian']:.2e} (<= {HESS_TOL:g}), J {rep['worst_j']:.2e} "
                    f"(<= {J_TOL:g}), recursive/iterative J {e_alg:.1e}, {dt:.1f}s (< 30s)")
    return _timed("derivatives", run)


def kalman_case(n, steps=64, seed=0):
    """Flow update of a standard-normal prior with ``h(x) = x``, ``y = 1``, unit noise."""
    t0 = time.perf_counter()
    prior = gaussian_particles(np.zeros(n), np.eye(n), 100, seed)
    lik = gaussian_likelihood(np.ones(n), lambda x: x, np.eye(n))
    post, _ = integrate_flow(prior, lik, FlowConfig(steps=steps))
    return post, time.perf_counter() - t0


def check_kalman(steps=64):
    def run():
        post1, t1 = kalman_case(1, steps)
        m1, v1 = post1.mean()[0], post1.cov()[0, 0]
        ok1 = abs(m1 - 0.5) <= 0.02 and abs(v1 - 0.5) <= 0.05 and t1 < 5
        post2, t2 = kalman_case(2, steps)
        m_ref, P_ref = np.full(2, 0.5), 0.5 * np.eye(2)
        em = np.linalg.norm(post2.mean() - m_ref) / np.linalg.norm(m_ref)
        eP = np.linalg.norm(post2.cov() - P_ref) / np.linalg.norm(P_ref)
        ok2 = em <= 0.03 and eP <= 0.08 and t2 < 5
        return ok1 and ok2, (f"1D mean {m1:.4f} var {v1:.4f} (0.5 +- 0.02 / 0.05, {t1:.2f}s); "
                             f"2D mean err {100 * em:.2f}% (<= 3%) cov err {100 * eP:.2f}% (<= 8%), {t2:.2f}s")
    return _timed("kalman-oracle", run)


def narrow_case(seed=0):
    prior = gaussian_particles([0.0], [[1.0]], 100, seed)
    lik = gaussian_likelihood([0.3], lambda x: x, [[0.01 ** 2]])
    return prior, lik


NARROW_FLOW = FlowConfig(integrator="heun", rtol=1e-4)


def check_degeneracy():
    def run():
        prior, lik = narrow_case()
        post, _ = integrate_flow(prior, lik, NARROW_FLOW)
        ess_flow = post.ess()
        distinct_flow = len(np.unique(post.locations, axis=0))
        ess_rw = bayes_reweight(prior, lik).effective_sample_size
        sir = baseline_sir(prior, lik, 0)
        distinct_sir = len(np.unique(sir.locations, axis=0))
        ok = ess_flow == 100 and distinct_flow == 100 and ess_rw < 5 and distinct_sir < 10
        return ok, (f"flow ESS {ess_flow:g} with {distinct_flow} distinct; reweight ESS {ess_rw:.2f} (< 5); "
                    f"SIR {distinct_sir} distinct (< 10)")
    return _timed("degeneracy", run)


def check_conservation(steps=64):
    def run():
        prior = gaussian_particles([0.0, 0.0], np.eye(2), 30, 1)
        lik = gaussian_likelihood([0.8, -0.4], lambda x: x, np.diag([0.5, 2.0]))
        worst = 0.0
        for variant in ("recursive", "iterative"):
            _, trace = integrate_flow(prior, lik, FlowConfig(variant=variant, steps=steps, trace=True))
            worst = max(worst, max(abs(s) for s in trace.weight_dot_sums))
        post, _ = integrate_flow(prior, flat_likelihood(), FlowConfig(steps=steps))
        moved = float(np.max(np.abs(post.locations - prior.locations)))
        g = gradient(prior, prior)
        exact = bool(np.all(g == 0.0))
        ok = worst <= 1e-12 and moved <= 1e-9 and exact
        return ok, (f"max |sum w'| {worst:.1e} (<= 1e-12); flat likelihood moved {moved:.1e} (<= 1e-9); "
                    f"gradient at perfect fit {'exactly 0' if exact else 'nonzero'}")
    return _timed("conservation", run)


def grid_posterior(log_density, lo=-10.0, hi=10.0, points=100_001):
    x = np.linspace(lo, hi, points)
    lp = log_density(x)
    w = np.exp(lp - lp.max())
    w /= w.sum()
    m = float(w @ x)
    return m, float(w @ (x - m) ** 2)


def check_chained(steps=64):
    def run():
        prior = gaussian_particles([0.0], [[1.0]], 200, 0)
        l1 = gaussian_likelihood([0.5], lambda x: x, [[1.0]])
        l2 = gaussian_likelihood([1.0], lambda x: x, [[1.0]])
        cfg = FlowConfig(steps=steps)
        chained = integrate_flow(integrate_flow(prior, l1, cfg)[0], l2, cfg)[0]
        single = integrate_flow(prior, user_likelihood(lambda x: l1.log_lik(x) + l2.log_lik(x)), cfg)[0]
        m, v = grid_posterior(lambda x: -0.5 * x ** 2 + l1.log_lik(x[:, None]) + l2.log_lik(x[:, None]))
        errs = []
        for post in (chained, single):
            errs += [abs(post.mean()[0] - m) / abs(m), abs(post.cov()[0, 0] - v) / v]
        ok = max(errs) <= 0.05
        return ok, (f"grid mean {m:.4f} var {v:.4f}; chained errors {100 * errs[0]:.2f}% / {100 * errs[1]:.2f}%, "
                    f"single {100 * errs[2]:.2f}% / {100 * errs[3]:.2f}% (<= 5%)")
    return _timed("chained-updates", run)


def check_order():
    def run():
        prior = gaussian_particles([0.0], [[1.0]], 10, 2)
        lik = gaussian_likelihood([1.0], lambda x: x, [[1.0]])
        ref = integrate_flow(prior, lik, FlowConfig(steps=4096))[0].locations
        errs = [float(np.max(np.abs(integrate_flow(prior, lik, FlowConfig(steps=s))[0].locations - ref)))
                for s in (8, 16, 32)]
        ratios = [errs[i] / errs[i + 1] for i in range(2)]
        ok = min(ratios) >= 8
        return ok, "errors " + ", ".join(f"{e:.2e}" for e in errs) + " at 8/16/32 steps; reduction factors " + \
            ", ".join(f"{r:.1f}" for r in ratios) + " (>= 8)"
    return _timed("rk4-order", run)


def check_reduction():
    def run():
        rng = np.random.default_rng(7)
        ref = ParticleSet.equal(rng.standard_normal((1000, 2)))
        res = reduce_particles(ref, 20)
        d_red = distance(res.particles, ref).total
        best = min(distance(ParticleSet.equal(ref.locations[rng.choice(1000, 20, replace=False)]), ref).total
                   for _ in range(100))
        monotone = all(b <= a for a, b in zip(res.distances, res.distances[1:]))
        ok = d_red < best and monotone
        return ok, (f"reduced distance {d_red:.4e} vs best random subset {best:.4e}; "
                    f"{len(res.distances) - 1} iterations {'monotone' if monotone else 'NOT monotone'}")
    return _timed("reduction-quality", run)


def check_determinism():
    def run():
        from .cli import run_config

        with tempfile.TemporaryDirectory() as tmp:
            outs = []
            for i in range(2):
                out = Path(tmp) / f"run{i}"
                code = run_config(demo_config_path(), out, quiet=True)
                if code != 0:
                    return False, f"demo run exited with {code}"
                outs.append((out / "estimates.csv").read_bytes())
        same = outs[0] == outs[1]
        return same, f"estimates.csv {'bit-identical' if same else 'differs'} across two runs ({len(outs[0])} bytes)"
    return _timed("determinism", run)


def check_performance(steps=64):
    def run():
        prior = gaussian_particles([0.0, 0.0], np.eye(2), 100, 3)
        lik = gaussian_likelihood([1.0, -0.5], lambda x: x, np.eye(2))
        t0 = time.perf_counter()
        integrate_flow(prior, lik, FlowConfig(steps=steps))
        dt = time.perf_counter() - t0
        return dt < 3.0, f"L=100, N=2, {steps} RK4 steps in {dt:.2f}s (< 3s)"
    return _timed("performance", run)


CHECKS = {
    "derivatives": "analytic gradient, Hessian and J-vectors against finite differences",
    "kalman-oracle": "1D and 2D flow updates against the exact Kalman posterior",
    "degeneracy": "narrow likelihood: flow keeps 100 distinct particles, reweighting and SIR collapse",
    "conservation": "weight derivatives sum to zero, flat likelihood is a fixed point, zero gradient at a perfect fit",
    "chained-updates": "two successive updates against one log-sum update and a dense-grid posterior",
    "rk4-order": "fixed-step RK4 error shrinks by >= 8 per step halving",
    "reduction-quality": "reduction beats random subsets and decreases the distance monotonically",
    "determinism": "the demo config reproduces estimates.csv bit for bit",
    "performance": "one 2D flow update with 100 particles in under 3 seconds",
}


def run_checks(names=None, flow_steps=64):
    names = list(CHECKS) if names is None else list(names)
    table = {
        "derivatives": lambda: check_derivatives(),
        "kalman-oracle": lambda: check_kalman(flow_steps),
        "degeneracy": check_degeneracy,
        "conservation": lambda: check_conservation(flow_steps),
        "chained-updates": lambda: check_chained(flow_steps),
        "rk4-order": check_order,
        "reduction-quality": check_reduction,
        "determinism": check_determinism,
        "performance": lambda: check_performance(flow_steps),
    }
    return [table[n]() for n in names]
