"""Recursive estimation: prediction, flow-based measurement update, baselines."""

from __future__ import annotations

import time
import zlib
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import norm, qmc

from .dirac import ParticleSet, bayes_reweight
from .distance import DistanceParams
from .errors import ContractError, FlowFiltError
from .flow import FlowConfig, integrate_flow
from .homotopy import LikelihoodModel
from .reduction import ReductionResult, reduce_particles

__all__ = [
    "GaussianNoise", "DeterministicNoise", "SystemModel", "Scenario", "StepRecord",
    "predict", "update", "baseline_sir", "reduce_particles", "ReductionResult",
    "gaussian_particles", "run_scenario", "system_model", "kalman_filter", "METHODS", "SYSTEM_MODELS",
]

METHODS = ("flow-recursive", "flow-iterative", "reweight", "sir")
SYSTEM_MODELS = ("identity", "linear", "random-walk", "coordinated-turn-2d", "cubic-drift")


@dataclass(frozen=True)
class GaussianNoise:
    """Zero-mean Gaussian noise drawn fresh for each particle."""

    cov: np.ndarray

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", np.linalg.cholesky(cov) if np.any(cov) else np.zeros_like(cov))

    @property
    def dim(self):
        return self.cov.shape[0]

    def sample(self, rng, count):
        return rng.standard_normal((count, self.dim)) @ self._chol.T


@dataclass(frozen=True)
class DeterministicNoise:
    """A fixed weighted set of noise realisations."""

    particles: ParticleSet

    @property
    def dim(self):
        return self.particles.dim


@dataclass(frozen=True)
class SystemModel:
    """``x_next = transition(x, u, w)``, vectorised over particle rows.

    ``inputs`` holds one input vector per time step (or is ``None`` for no
    input); ``noise`` is ``None``, ``GaussianNoise`` or ``DeterministicNoise``.
    """

    transition: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    dim: int
    noise: GaussianNoise | DeterministicNoise | None = None
    inputs: Sequence | None = None
    name: str = "custom"

    def input_at(self, step: int):
        if self.inputs is None or len(self.inputs) == 0:
            return np.zeros(self.dim)
        u = self.inputs[min(step, len(self.inputs) - 1)]
        return np.atleast_1d(np.asarray(u, dtype=float))


def _coordinated_turn(dt):
    def f(x):
        px, py, vx, vy, om = x.T
        small = np.abs(om) < 1e-9
        om_s = np.where(small, 1.0, om)
        s, c = np.sin(om_s * dt), np.cos(om_s * dt)
        a = np.where(small, dt, s / om_s)
        b = np.where(small, 0.0, (1 - c) / om_s)
        c_ = np.where(small, 1.0, c)
        s_ = np.where(small, 0.0, s)
        return np.column_stack([px + a * vx - b * vy, py + b * vx + a * vy,
                                c_ * vx - s_ * vy, s_ * vx + c_ * vy, om])
    return f


def system_model(name: str, dim: int, A=None, dt: float = 1.0, noise=None, inputs=None) -> SystemModel:
    """Registry of additive-noise models ``x_next = f(x) + u + w``."""
    if name in ("identity", "random-walk"):
        f = lambda x: x  # noqa: E731
    elif name == "linear":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if A.shape != (dim, dim):
            raise ContractError(f"A must be {dim}x{dim}, got {A.shape}")
        f = lambda x: x @ A.T  # noqa: E731
    elif name == "coordinated-turn-2d":
        if dim != 5:
            raise ContractError("coordinated-turn-2d needs the state [px, py, vx, vy, omega]")
        f = _coordinated_turn(dt)
    elif name == "cubic-drift":
        f = lambda x: x - dt * x ** 3  # noqa: E731
    else:
        raise ContractError(f"unknown system model {name!r}")
    return SystemModel(lambda x, u, w: f(x) + u + w, dim, noise, inputs, name)


def predict(current: ParticleSet, system: SystemModel, u=None, rng=None, params: DistanceParams = DistanceParams()) -> ParticleSet:
    """Propagate particles through the system model.

    Random noise: one draw per particle, weights kept. Deterministic noise of
    ``S`` realisations: the ``L * S`` product set is reduced back to ``L``
    equally weighted particles.
    """
    x, w = current.locations, current.weights
    L, n = x.shape
    if n != system.dim:
        raise ContractError(f"state dimension {n} does not match system dimension {system.dim}")
    u = np.zeros(n) if u is None else np.atleast_1d(np.asarray(u, dtype=float))
    noise = system.noise
    if noise is None:
        return ParticleSet(system.transition(x, u, np.zeros((L, n))), w)
    if isinstance(noise, GaussianNoise):
        if rng is None:
            raise ContractError("random noise needs a seeded generator")
        return ParticleSet(system.transition(x, u, noise.sample(rng, L)), w)
    v = noise.particles
    S = v.size
    xs = np.repeat(x, S, axis=0)
    ws = np.tile(v.locations, (L, 1))
    weights = np.outer(w, v.weights).ravel()
    product = ParticleSet(system.transition(xs, u, ws), weights / weights.sum())
    if S == 1:
        return product
    return reduce_particles(product, L, params).particles


def update(current: ParticleSet, lik: LikelihoodModel, cfg: FlowConfig = FlowConfig()) -> ParticleSet:
    """Measurement update by the Newton flow; independent of any system model."""
    return integrate_flow(current, lik, cfg)[0]


def baseline_sir(current: ParticleSet, lik: LikelihoodModel, seed) -> ParticleSet:
    """Bootstrap update: reweight, then multinomial resampling in place."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    post = bayes_reweight(current, lik).posterior
    idx = rng.choice(post.size, size=post.size, replace=True, p=post.weights)
    return ParticleSet.equal(post.locations[np.sort(idx)])


def gaussian_particles(mean, cov, count: int, seed: int, oversample: int = 10,
                       params: DistanceParams = DistanceParams()) -> ParticleSet:
    """Equally weighted particle set for ``N(mean, cov)``.

    At least ``oversample * count`` scrambled Sobol points (rounded up to a
    power of two) are mapped through the normal quantile function, shifted
    and rescaled to the exact moments, then reduced to ``count`` particles.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = mean.size
    if cov.shape != (n, n):
        raise ContractError(f"covariance must be {n}x{n}, got {cov.shape}")
    m = 1 << int(np.ceil(np.log2(max(oversample * count, count + n + 1))))
    u = qmc.Sobol(n, scramble=True, seed=seed).random(m)
    z = norm.ppf(u)
    z -= z.mean(axis=0)
    lz = np.linalg.cholesky(z.T @ z / m)
    z = np.linalg.solve(lz, z.T).T @ np.linalg.cholesky(cov).T + mean
    ref = ParticleSet.equal(z)
    if count == m:
        return ref
    return reduce_particles(ref, count, params).particles


@dataclass(frozen=True)
class Scenario:
    """Everything needed for a filtering run.

    ``likelihood_for`` builds the likelihood of one measurement vector.
    """

    system: SystemModel
    likelihood_for: Callable[[np.ndarray], LikelihoodModel]
    prior: ParticleSet
    measurements: Sequence = ()
    flow_cfg: FlowConfig = field(default_factory=FlowConfig)
    seed: int = 0
    measurement_dim: int | None = None

    def __post_init__(self):
        if self.prior.dim != self.system.dim:
            raise ContractError(f"prior dimension {self.prior.dim} != system dimension {self.system.dim}")
        dims = {np.atleast_1d(y).size for y in self.measurements}
        if self.measurement_dim is not None:
            dims.add(self.measurement_dim)
        if len(dims) > 1:
            raise ContractError(f"measurements have inconsistent dimensions {sorted(dims)}")


@dataclass(frozen=True)
class StepRecord:
    step: int
    method: str
    particles: ParticleSet
    mean: np.ndarray
    cov: np.ndarray
    ess: float
    wall_ms: float


def method_rng(seed: int, method: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(method.encode())])


def run_scenario(s: Scenario, method: str = "flow-recursive", on_update=None) -> list[StepRecord]:
    """Alternate prediction and update over the measurement sequence.

    With no measurements a single record of the prior (step 0) is returned.
    ``on_update(step, result)`` is called after each flow update with the
    ``(posterior, trace)`` pair. Errors raised while processing a measurement
    carry its 1-based index in a ``step`` attribute.
    """
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}; choose from {METHODS}")
    rng = method_rng(s.seed, method)
    cur = s.prior
    if method.startswith("flow") and not cur.is_equally_weighted:
        cur = reduce_particles(cur, cur.size, s.flow_cfg.params).particles
    records = []
    if not s.measurements:
        return [StepRecord(0, method, cur, cur.mean(), cur.cov(), cur.ess(), 0.0)]
    cfg = s.flow_cfg
    if method.startswith("flow"):
        cfg = replace(cfg, variant=method.split("-", 1)[1])
    for k, y in enumerate(s.measurements, start=1):
        t0 = time.perf_counter()
        try:
            cur = predict(cur, s.system, s.system.input_at(k - 1), rng, cfg.params)
            lik = s.likelihood_for(np.atleast_1d(np.asarray(y, dtype=float)))
            if method.startswith("flow"):
                result = integrate_flow(cur, lik, cfg)
                cur = result[0]
                if on_update is not None:
                    on_update(k, result)
            elif method == "reweight":
                cur = bayes_reweight(cur, lik).posterior
            else:
                cur = baseline_sir(cur, lik, rng)
        except FlowFiltError as exc:
            exc.step = k
            raise
        wall = 1e3 * (time.perf_counter() - t0)
        records.append(StepRecord(k, method, cur, cur.mean(), cur.cov(), cur.ess(), wall))
    return records


def kalman_filter(mean, cov, A, Q, H, R, measurements, inputs=None):
    """Exact linear-Gaussian reference: ``(mean, cov)`` after every update.

    Prediction precedes each update, matching ``run_scenario``.
    """
    m = np.atleast_1d(np.asarray(mean, dtype=float))
    P = np.atleast_2d(np.asarray(cov, dtype=float))
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    out = []
    for k, y in enumerate(measurements):
        u = np.zeros_like(m) if not inputs else np.atleast_1d(np.asarray(inputs[min(k, len(inputs) - 1)], dtype=float))
        m = A @ m + u
        P = A @ P @ A.T + Q
        S = H @ P @ H.T + R
        K = np.linalg.solve(S, H @ P).T
        m = m + K @ (np.atleast_1d(np.asarray(y, dtype=float)) - H @ m)
        P = P - K @ S @ K.T
        P = 0.5 * (P + P.T)
        out.append((m.copy(), P.copy()))
    return out
