"""Reduction of a Dirac mixture to fewer equally weighted particles.

The reduced set is a local minimiser of the Cramér-von Mises distance to the
reference, found by a damped Newton iteration that never accepts an increase
of the distance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dirac import ParticleSet, xlog
from .distance import DistanceParams, distance, gradient_and_hessian, ref_ref_term
from .errors import ContractError, FlowStalledError

log = logging.getLogger(__name__)

SEPARATION = 1e-6
# a pair closer than this fraction of the typical spacing counts as merged
MERGE_FRACTION = 0.05
_CANDIDATES = 2048
_TRIES = 3


@dataclass(frozen=True)
class ReductionResult:
    particles: ParticleSet
    converged: bool
    iterations: int
    distances: list = field(default_factory=list)
    grad_norm: float = float("nan")


def select_subset(ref: ParticleSet, count: int) -> np.ndarray:
    """Indices of ``count`` distinct reference particles, heaviest first.

    Ties in weight are broken by farthest-point selection; the very first pick
    among equals is the one closest to the reference mean.
    """
    x, w = ref.locations, ref.weights
    chosen: list[int] = []
    nearest = np.full(len(w), np.inf)
    center = ref.mean()
    for level in np.unique(w)[::-1]:
        group = np.flatnonzero(w == level)
        while len(chosen) < count:
            if chosen:
                cand = group[nearest[group] > 0]
                if cand.size == 0:
                    break
                pick = int(cand[np.argmax(nearest[cand])])
            else:
                pick = int(group[np.argmin(np.sum((x[group] - center) ** 2, axis=1))])
            chosen.append(pick)
            nearest = np.minimum(nearest, np.sum((x - x[pick]) ** 2, axis=1))
        if len(chosen) >= count:
            break
    if len(chosen) < count:
        raise ContractError(f"reference has fewer than {count} distinct locations")
    return np.array(sorted(chosen))


def _move_gain(x, w, k, ref, cand, K1):
    """Change of the distance when particle ``k`` (weight ``w``) moves to each row of ``cand``."""
    others = np.delete(x, k, axis=0)

    def row(points, pts_w, at):
        return xlog(np.sum((at[:, None, :] - points[None, :, :]) ** 2, axis=-1)) @ pts_w

    here = x[k][None, :]
    d_xr = w * (row(ref.locations, ref.weights, cand) - row(ref.locations, ref.weights, here))
    d_xx = 2.0 * w * w * (row(others, np.ones(len(others)), cand) - row(others, np.ones(len(others)), here))
    dm = w * x.sum(axis=0) - ref.weights @ ref.locations
    shifted = dm[None, :] + w * (cand - x[k][None, :])
    d_e = np.sum(shifted ** 2, axis=1) - dm @ dm
    return -2.0 * d_xr + d_xx + K1 * d_e


def _relocation_targets(x, ref, params, spacing, tries):
    """Index of the particle to move out of the closest pair and candidate targets.

    Targets are reference points at least ``spacing`` from every particle,
    ranked by the first-order change of the distance.
    """
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    k = int(np.unravel_index(np.argmin(d2), d2.shape)[1])
    cand = ref.locations[::max(1, ref.size // _CANDIDATES)]
    gap = np.min(np.sum((cand[:, None, :] - x[None, :, :]) ** 2, axis=-1), axis=1)
    gain = _move_gain(x, 1.0 / x.shape[0], k, ref, cand, params.K1)
    gain[gap < spacing ** 2] = np.inf
    order = [c for c in np.argsort(gain, kind="stable")[:tries] if np.isfinite(gain[c])]
    return k, cand[order]


def reduce_particles(ref: ParticleSet, count: int, params: DistanceParams = DistanceParams(),
                     init=None, max_iter: int = 200, gtol: float = 1e-8) -> ReductionResult:
    """Approximate ``ref`` by ``count`` equally weighted particles.

    ``init`` is ``None`` (subset selection) or an initial ``(count, N)``
    location array / ``ParticleSet``.
    """
    if not 1 <= count <= ref.size:
        raise ContractError(f"need 1 <= L <= M, got L={count}, M={ref.size}")
    if init is None:
        x = ref.locations[select_subset(ref, count)].copy()
    else:
        x = np.array(init.locations if isinstance(init, ParticleSet) else init, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape != (count, ref.dim):
            raise ContractError(f"initial set must have shape {(count, ref.dim)}, got {x.shape}")

    # imported here: flow builds on this module for equalising weighted priors
    from .flow import min_pair_distance

    rr = ref_ref_term(ref)
    # merged particles are spurious local minima of the log kernel
    min_sep = SEPARATION * np.sqrt(np.sum(np.var(ref.locations, axis=0)) + np.finfo(float).tiny)
    approx = ParticleSet.equal(x)
    best = distance(approx, ref, params, ref_ref=rr).total
    history = [best]
    spacing = np.sqrt(np.sum(np.var(ref.locations, axis=0))) * count ** (-1.0 / ref.dim)
    merge_tol = MERGE_FRACTION * spacing
    approx, best, it, lam, gnorm, converged = _descend(approx, ref, params, rr, best, history, 0, max_iter,
                                                      gtol, min_sep, 0.0)
    # a merged pair is a poor local minimum; restart from a relocated particle
    # and keep the outcome only if it ends strictly lower
    for _ in range(count):
        x = approx.locations
        if x.shape[0] < 2 or min_pair_distance(x) >= merge_tol or it >= max_iter:
            break
        k, targets = _relocation_targets(x, ref, params, spacing, _TRIES)
        for target in targets:
            start = x.copy()
            start[k] = target
            trial = ParticleSet.equal(start)
            d0 = distance(trial, ref, params, ref_ref=rr).total
            out = _descend(trial, ref, params, rr, d0, [], it, max_iter, gtol, min_sep, 0.0)
            it = out[2]
            if out[1] < best:
                approx, best, _, lam, gnorm, converged = out
                history.append(best)
                break
        else:
            break
    if not converged:
        log.debug("reduction stopped after %d iterations with |G| = %.3g", it, gnorm)
    return ReductionResult(approx, converged, it, history, gnorm)


def _descend(approx, ref, params, rr, best, history, it, max_iter, gtol, min_sep, lam):
    """Damped Newton iterations from ``approx``; appends accepted distances to ``history``."""
    # imported here: flow builds on this module for equalising weighted priors
    from .flow import min_pair_distance, newton_step

    shape = approx.locations.shape
    while True:
        g, h = gradient_and_hessian(approx, ref, params, jitter=True)
        gnorm = float(np.linalg.norm(g))
        converged = gnorm <= gtol
        if converged or it >= max_iter:
            break
        it += 1
        base = 1e-8 * abs(np.trace(h)) / h.shape[0] or 1e-12
        improved = False
        for _ in range(30):
            try:
                step, lam_used = newton_step(h, g, lam)
            except FlowStalledError:
                lam = max(10.0 * lam, base)
                continue
            trial = ParticleSet.equal(approx.locations + step.reshape(shape))
            if min_pair_distance(trial.locations) < min_sep:
                lam = max(10.0 * lam_used, base)
                continue
            d_new = distance(trial, ref, params, ref_ref=rr).total
            if np.isfinite(d_new) and d_new <= best:
                improved = True
                approx, best = trial, d_new
                lam = lam_used / 10.0 if lam_used > base else 0.0
                break
            lam = max(10.0 * lam_used, base)
        if not improved:
            break
        history.append(best)
    return approx, best, it, lam, gnorm, converged
