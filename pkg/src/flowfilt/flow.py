"""Newton flow of equally weighted particles over artificial time.

The flow keeps the distance gradient at zero while the likelihood is faded in:
``H(eta) eta' + J(eta) = 0`` is solved for ``eta'`` at every stage point and
integrated from ``gamma = 0`` to ``gamma = 1``.

Self-interaction regularisation
-------------------------------
The reference term of a particle against its own location has an unbounded
second derivative for the log kernel. Dropping it leaves an indefinite Hessian
whose solution scatters the particles. The flow restores it with the kernel
averaged over the particle's own cell, which equals the smoothed kernel at
radius ``eps = self_radius * rho * exp(-1/N)``; ``rho`` is the radius of a ball
holding ``1/L`` of a kernel density estimate at the particle. In the iterative
flow the same radius smooths the pair formed by a particle and its own anchor.

Nothing in the flow equation keeps neighbours apart, so small velocity errors
can make particles run into each other over a long contraction. A pair
Laplacian that is negligible at the usual spacing (``barrier``) damps the
relative motion of pairs that come much closer than their neighbourhood.
Its weight saturates, so a pair that is already almost coincident (common in
independent draws) cannot wreck the conditioning of the linear solve.
``self_radius = 0`` and ``barrier = 0`` switch both off.
"""

from __future__ import annotations

import json
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .dirac import ParticleSet, normalize_log_weights, plog
from .distance import (
    DistanceParams,
    _assemble,
    _own_blocks,
    cross_diag_blocks,
    gradient,
    hessian_recursive,
    smoothed_self_kernel,
)
from .errors import CoincidenceError, ContractError, FlowStalledError, UpdateImpossibleError
from .homotopy import LikelihoodModel, effective_likelihood

log = logging.getLogger(__name__)

VARIANTS = ("recursive", "iterative")
INTEGRATORS = ("rk4", "heun")
GUARD_RADIUS = 1e-10
_MAX_RETRIES = 8
_MAX_HALVINGS = 12
BARRIER_RADIUS = 0.25
BARRIER_CAP = 10.0


@dataclass(frozen=True)
class FlowConfig:
    variant: str = "recursive"
    integrator: str = "rk4"
    steps: int = 64
    rtol: float = 1e-6
    atol: float = 1e-9
    damping: float = 0.0
    params: DistanceParams = field(default_factory=DistanceParams)
    self_radius: float = 0.5
    barrier: float = 1.0
    trace: bool = False
    max_steps: int = 200_000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.integrator not in INTEGRATORS:
            raise ContractError(f"integrator must be one of {INTEGRATORS}, got {self.integrator!r}")
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if not self.rtol > 0 or not self.atol > 0:
            raise ContractError("tolerances must be positive")
        if self.damping < 0 or self.self_radius < 0 or self.barrier < 0:
            raise ContractError("damping, self_radius and barrier must be nonnegative")


@dataclass
class FlowTrace:
    gammas: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    weight_dot_sums: list = field(default_factory=list)

    def record(self, gamma, locations):
        self.gammas.append(float(gamma))
        self.snapshots.append(ParticleSet.equal(locations))

    def rows(self):
        for gamma, snap in zip(self.gammas, self.snapshots):
            for i, x in enumerate(snap.locations):
                yield gamma, i, x

    def write_csv(self, path):
        path = Path(path)
        n = self.snapshots[0].dim if self.snapshots else 0
        with path.open("w", encoding="utf-8") as fh:
            fh.write(",".join(["gamma", "particle_index"] + [f"x{i + 1}" for i in range(n)]) + "\n")
            for gamma, i, x in self.rows():
                fh.write(",".join([f"{gamma:.17g}", str(i)] + [f"{v:.17g}" for v in x]) + "\n")

    def write_diagnostics(self, path):
        Path(path).write_text(json.dumps(self.diagnostics, indent=2), encoding="utf-8")


# weights of the reference and their artificial-time derivatives

def _ratios(locations, lik: LikelihoodModel, gamma):
    r = np.asarray(lik.log_ratio(locations, gamma), dtype=float)
    if np.all(r == -np.inf):
        raise UpdateImpossibleError("likelihood is zero at every particle location")
    return r


def weights_gamma(ref_locations, lik: LikelihoodModel, gamma: float) -> np.ndarray:
    """Reference weights ``f_L(x_i, gamma) / sum_j f_L(x_j, gamma)``."""
    if not 0.0 <= gamma <= 1.0:
        raise ContractError(f"gamma must lie in [0, 1], got {gamma}")
    return normalize_log_weights(lik.log_lik_gamma(np.asarray(ref_locations, dtype=float), gamma))


def weight_dot_iterative(ref_locations, lik: LikelihoodModel, gamma: float) -> np.ndarray:
    """Quotient-rule derivative of ``weights_gamma`` as ``w_i (r_i - sum_j w_j r_j)``."""
    ref_locations = np.asarray(ref_locations, dtype=float)
    w = weights_gamma(ref_locations, lik, gamma)
    r = _ratios(ref_locations, lik, gamma)
    alive = np.isfinite(r)
    w = np.where(alive, w, 0.0)
    r = np.where(alive, r, 0.0)
    return w * (r - np.sum(w * r) / np.sum(w))


def weight_dot_recursive(current: ParticleSet, lik_eff: LikelihoodModel, gamma: float) -> np.ndarray:
    """``(1/L) (r_i - mean_j r_j)`` for an equally weighted current set."""
    if not current.is_equally_weighted:
        raise ContractError("the recursive flow needs an equally weighted particle set")
    r = _ratios(current.locations, lik_eff, gamma)
    if not np.all(np.isfinite(r)):
        raise UpdateImpossibleError("likelihood vanishes at some particles; the flow needs it positive there")
    L = current.size
    return (r - np.mean(r)) / L


def j_vector_iterative(approx: ParticleSet, ref_locations, weight_dots, params: DistanceParams) -> np.ndarray:
    """Derivative of the distance gradient w.r.t. artificial time, stacked."""
    x, w = approx.locations, approx.weights
    xr = np.asarray(ref_locations, dtype=float)
    if xr.ndim == 1:
        xr = xr[:, None]
    wd = np.asarray(weight_dots, dtype=float)
    if xr.shape[1] != x.shape[1] or wd.shape != (xr.shape[0],):
        raise ContractError("dimension mismatch between approx, reference and weight derivatives")
    p = plog(x[:, None, :] - xr[None, :, :])
    j = -w[:, None] * (4.0 * np.einsum("i,kin->kn", wd, p) + params.K2 * (wd @ xr)[None, :])
    return j.ravel()


def j_vector_recursive(current: ParticleSet, weight_dots, params: DistanceParams) -> np.ndarray:
    return j_vector_iterative(current, current.locations, weight_dots, params)


def newton_step(H, J, damping: float = 0.0, eta_norm: float = 0.0):
    """Solve ``(H + damping I) eta' = -J`` with a symmetric indefinite factorisation.

    On a failed factorisation or an implausibly large solution the damping is
    raised and the solve retried. Returns ``(eta', damping_used)``.
    """
    H = np.asarray(H, dtype=float)
    J = np.asarray(J, dtype=float)
    if H.shape != (J.size, J.size):
        raise ContractError(f"Hessian shape {H.shape} does not match J of size {J.size}")
    n = J.size
    guard = 1e6 * (1.0 + eta_norm)
    floor = max(1e-8 * abs(np.trace(H)) / n, np.finfo(float).tiny)
    lam = float(damping)
    reason = ""
    for attempt in range(_MAX_RETRIES + 1):
        if attempt:
            lam = max(10.0 * lam, floor)
        a = H + lam * np.eye(n) if lam else H
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
                sol = scipy.linalg.solve(a, -J, assume_a="sym", check_finite=False)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError) as exc:
            reason = f"factorisation failed: {exc}"
            continue
        norm = float(np.linalg.norm(sol))
        if not np.isfinite(norm):
            reason = "non-finite solution"
            continue
        if norm > guard:
            reason = f"solution norm {norm:.3g} exceeds guard {guard:.3g}"
            continue
        return sol, lam
    raise FlowStalledError(f"Newton step failed after {_MAX_RETRIES} retries ({reason})",
                           {"damping": lam, "reason": reason, "dim": n})


def local_radius_sq(locations) -> np.ndarray:
    """Squared radius of a ball holding ``1/L`` of a kernel density estimate.

    This is the local particle spacing, a smooth function of the locations.
    """
    L, n = locations.shape
    tiny = np.finfo(float).tiny
    d = locations[:, None, :] - locations[None, :, :]
    cov = np.atleast_2d(np.cov(locations, rowvar=False, bias=True)) if L > 1 else np.eye(n)
    bw = L ** (-2.0 / (n + 4))
    try:
        chol = np.linalg.cholesky(bw * cov)
    except np.linalg.LinAlgError:
        chol = np.sqrt(bw * max(np.trace(cov) / n, tiny)) * np.eye(n)
    z = np.linalg.solve(chol, d.reshape(-1, n).T).T.reshape(L, L, n)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    dens = np.mean(np.exp(-0.5 * np.sum(z * z, axis=-1)), axis=1) * np.exp(-0.5 * (n * np.log(2 * np.pi) + logdet))
    ball = np.pi ** (n / 2) / math.gamma(n / 2 + 1)
    return np.maximum((L * dens * ball) ** (-2.0 / n), tiny)


def self_radius_sq(locations, factor: float, rho2=None) -> np.ndarray:
    """Squared self-interaction radius ``(factor * rho * exp(-1/N))**2`` per particle.

    The log kernel averaged over a ball of radius ``rho`` equals the smoothed
    kernel at ``eps = rho * exp(-1/N)``.
    """
    n = locations.shape[1]
    rho2 = local_radius_sq(locations) if rho2 is None else rho2
    return factor ** 2 * rho2 * np.exp(-2.0 / n)


def _self_blocks(locations, w, factor, rho2):
    eps2 = self_radius_sq(locations, factor, rho2)
    return 4.0 * (w * w)[:, None, None] * smoothed_self_kernel(np.zeros(locations.shape), eps2)


def _barrier(blocks, x, w, rho2, strength):
    """Add a pair Laplacian with weights ``4 w_k w_l s min(b^2 rho_k rho_l / r_kl^2, cap)^2``.

    It is negligible at the usual spacing and stiffens the relative motion of
    pairs that come much closer than their neighbourhood, so that particles
    cannot run into each other.
    """
    d = x[:, None, :] - x[None, :, :]
    r2 = np.sum(d * d, axis=-1)
    np.fill_diagonal(r2, np.inf)
    q = BARRIER_RADIUS ** 2 * np.sqrt(np.outer(rho2, rho2)) / np.maximum(r2, np.finfo(float).tiny)
    # saturate so that one tight pair cannot wreck the conditioning of the solve
    q = np.minimum(q, BARRIER_CAP)
    kappa = 4.0 * strength * np.outer(w, w) * q * q
    eye = np.eye(x.shape[1])
    blocks -= kappa[:, :, None, None] * eye
    idx = np.arange(len(w))
    blocks[idx, idx] += np.sum(kappa, axis=1)[:, None, None] * eye


class _Flow:
    """Right-hand side of the flow ODE for one update."""

    def __init__(self, prior: ParticleSet, lik: LikelihoodModel, cfg: FlowConfig):
        self.prior = prior
        self.lik = lik
        self.cfg = cfg
        self.shape = prior.locations.shape
        self.w = prior.weights
        self.last = {}
        self.weight_dot_sums = []

    def hessian(self, approx: ParticleSet, ref: ParticleSet | None, jitter: bool) -> np.ndarray:
        cfg = self.cfg
        x, w = approx.locations, approx.weights
        if ref is None and cfg.self_radius == 0 and cfg.barrier == 0:
            return hessian_recursive(approx, cfg.params, jitter=jitter)
        blocks, own_diag = _own_blocks(x, w, cfg.params.K2, jitter)
        idx = np.arange(len(w))
        rho2 = local_radius_sq(x) if cfg.self_radius > 0 or cfg.barrier > 0 else None
        if ref is None:
            if cfg.self_radius > 0:
                blocks[idx, idx] -= _self_blocks(x, w, cfg.self_radius, rho2)
        else:
            anchor = self_radius_sq(x, cfg.self_radius, rho2) if cfg.self_radius > 0 else None
            blocks[idx, idx] += own_diag - cross_diag_blocks(x, w, ref.locations, ref.weights, anchor_eps2=anchor)
        if cfg.barrier > 0:
            _barrier(blocks, x, w, rho2, cfg.barrier)
        return _assemble(blocks)

    def __call__(self, eta: np.ndarray, gamma: float, jitter: bool = False) -> np.ndarray:
        cfg = self.cfg
        gamma = min(max(gamma, 0.0), 1.0)
        x = eta.reshape(self.shape)
        approx = ParticleSet(x, self.w)
        if cfg.variant == "recursive":
            lik_eff = effective_likelihood(self.lik, gamma)
            wd = weight_dot_recursive(approx, lik_eff, gamma)
            J = j_vector_recursive(approx, wd, cfg.params)
            ref = None
        else:
            xr = self.prior.locations
            ref = ParticleSet(xr, weights_gamma(xr, self.lik, gamma))
            wd = weight_dot_iterative(xr, self.lik, gamma)
            J = j_vector_iterative(approx, xr, wd, cfg.params)
        self.weight_dot_sums.append(float(np.sum(wd)))
        H = self.hessian(approx, ref, jitter)
        sol, lam = newton_step(H, J, cfg.damping, float(np.linalg.norm(eta)))
        self.last = {"weight_dot_sum": float(np.sum(wd)), "damping": lam, "j_norm": float(np.linalg.norm(J))}
        if cfg.trace:
            g = gradient(approx, ref if ref is not None else approx, cfg.params)
            self.last.update(grad_norm=float(np.linalg.norm(g)), hessian_cond=float(np.linalg.cond(H)))
        return sol


def min_pair_distance(locations) -> float:
    x = np.asarray(locations)
    if x.shape[0] < 2:
        return np.inf
    d = x[:, None, :] - x[None, :, :]
    r2 = np.sum(d * d, axis=-1)
    np.fill_diagonal(r2, np.inf)
    return float(np.sqrt(np.min(r2)))


def _rk4(f, eta, g, h, jitter):
    k1 = f(eta, g, jitter)
    diag = dict(f.last)
    k2 = f(eta + 0.5 * h * k1, g + 0.5 * h, jitter)
    k3 = f(eta + 0.5 * h * k2, g + 0.5 * h, jitter)
    k4 = f(eta + h * k3, g + h, jitter)
    return eta + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4), diag


class _Integration:
    def __init__(self, f: _Flow, trace: FlowTrace | None):
        self.f = f
        self.trace = trace
        self.steps = 0

    def _accept(self, eta, g, h, diag):
        self.steps += 1
        if self.trace is not None:
            self.trace.record(g, eta.reshape(self.f.shape))
            self.trace.diagnostics.append({"gamma": float(g), "step_size": float(h), **diag})

    def rk4_step(self, eta, g, h, depth=0, jitter=False):
        try:
            new, diag = _rk4(self.f, eta, g, h, jitter)
            if min_pair_distance(new.reshape(self.f.shape)) < GUARD_RADIUS:
                raise CoincidenceError("particles approached within the guard radius")
        except CoincidenceError as exc:
            if depth >= _MAX_HALVINGS:
                raise FlowStalledError(f"step at gamma={g:.6g} keeps colliding particles: {exc}",
                                       {"gamma": g, "step_size": h}) from exc
            mid = self.rk4_step(eta, g, h / 2, depth + 1, True)
            return self.rk4_step(mid, g + h / 2, h / 2, depth + 1, True)
        self._accept(new, g + h, h, diag)
        return new

    def run_rk4(self, eta, steps):
        h = 1.0 / steps
        for i in range(steps):
            eta = self.rk4_step(eta, i * h, h)
        return eta

    def run_heun(self, eta, rtol, atol, max_steps):
        f = self.f
        g, h = 0.0, None
        jitter = False
        k1 = diag = None
        for _ in range(max_steps):
            if g >= 1.0:
                return eta
            try:
                if k1 is None:
                    k1 = f(eta, g, jitter)
                    diag = dict(f.last)
                if h is None:
                    # first step moves the fastest particle by about a tenth of the spread
                    spread = float(np.std(eta)) or 1.0
                    speed = float(np.max(np.abs(k1)))
                    h = min(1.0 / 64, 0.1 * spread / speed) if speed > 0 else 1.0 / 64
                h = min(h, 1.0 - g)
                k2 = f(eta + h * k1, g + h, jitter)
            except CoincidenceError:
                jitter, h, k1 = True, (h or 1.0 / 64) / 2, None
                continue
            except FlowStalledError:
                if k1 is None:
                    raise
                h /= 4
                if h < 1e-14:
                    raise
                continue
            new = eta + 0.5 * h * (k1 + k2)
            scale = atol + rtol * max(np.max(np.abs(eta)), np.max(np.abs(new)))
            err = float(np.sqrt(np.mean((0.5 * h * (k2 - k1) / scale) ** 2)))
            if err <= 1.0 and min_pair_distance(new.reshape(f.shape)) >= GUARD_RADIUS:
                g = 1.0 if 1.0 - (g + h) < 1e-14 else g + h
                eta = new
                self._accept(eta, g, h, diag)
                k1 = None
                h *= min(5.0, max(0.2, 0.9 / np.sqrt(err))) if err > 0 else 5.0
            else:
                h *= max(0.1, 0.9 / np.sqrt(err)) if err > 1.0 else 0.5
                if h < 1e-14:
                    raise FlowStalledError(f"adaptive step size underflow at gamma={g:.6g}", {"gamma": g})
        raise FlowStalledError(f"adaptive integration exceeded {max_steps} steps", {"gamma": g})


def integrate_flow(prior: ParticleSet, lik: LikelihoodModel, cfg: FlowConfig = FlowConfig()):
    """Move the prior particles to the posterior along the Newton flow.

    Returns ``(posterior, trace)``; ``trace`` is ``None`` unless ``cfg.trace``.
    Weighted priors are first reduced to an equally weighted set of the same
    size.
    """
    if not prior.is_equally_weighted:
        from .reduction import reduce_particles

        prior = reduce_particles(prior, prior.size, cfg.params).particles
    if np.all(np.asarray(lik.log_lik(prior.locations)) == -np.inf):
        raise UpdateImpossibleError("likelihood is zero on the whole prior support")
    trace = FlowTrace() if cfg.trace else None
    if trace is not None:
        trace.record(0.0, prior.locations)
    f = _Flow(prior, lik, cfg)
    run = _Integration(f, trace)
    eta = prior.locations.ravel().copy()
    t0 = time.perf_counter()
    if cfg.integrator == "rk4":
        eta = run.run_rk4(eta, cfg.steps)
    else:
        eta = run.run_heun(eta, cfg.rtol, cfg.atol, cfg.max_steps)
    log.debug("flow finished in %.3f s over %d steps", time.perf_counter() - t0, run.steps)
    if trace is not None:
        trace.weight_dot_sums = list(f.weight_dot_sums)
    posterior = ParticleSet.equal(eta.reshape(f.shape))
    return posterior, trace
