"""Dirac mixture densities, log kernels and the one-shot Bayes reweighting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, UpdateImpossibleError

WEIGHT_FLOOR = 1e-300
_SUM_TOL = 1e-12


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ParticleSet:
    """Weighted Dirac mixture with ``L`` components in ``R^N``.

    ``locations`` has shape ``(L, N)`` and ``weights`` shape ``(L,)``. Both are
    stored as read-only arrays.
    """

    locations: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.locations, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        w = np.asarray(self.weights, dtype=float)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ContractError(f"locations must be an L x N matrix, got shape {x.shape}")
        if w.shape != (x.shape[0],):
            raise ContractError(f"expected {x.shape[0]} weights, got shape {w.shape}")
        if not np.all(np.isfinite(x)):
            raise ContractError("particle locations must be finite")
        if not np.all(w > 0):
            raise ContractError("particle weights must be strictly positive")
        if abs(math.fsum(w) - 1.0) > _SUM_TOL:
            raise ContractError(f"weights sum to {math.fsum(w)!r}, not 1")
        object.__setattr__(self, "locations", _frozen(x))
        object.__setattr__(self, "weights", _frozen(w))

    @classmethod
    def equal(cls, locations) -> ParticleSet:
        x = np.asarray(locations, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n = x.shape[0]
        return cls(x, np.full(n, 1.0 / n))

    @property
    def size(self) -> int:
        return self.locations.shape[0]

    @property
    def dim(self) -> int:
        return self.locations.shape[1]

    @property
    def is_equally_weighted(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def mean(self) -> np.ndarray:
        return self.weights @ self.locations

    def cov(self) -> np.ndarray:
        d = self.locations - self.mean()
        return (self.weights[:, None] * d).T @ d

    def ess(self) -> float:
        return effective_sample_size(self.weights)

    def with_locations(self, locations) -> ParticleSet:
        return ParticleSet(locations, self.weights)

    def __eq__(self, other):
        if not isinstance(other, ParticleSet):
            return NotImplemented
        return np.array_equal(self.locations, other.locations) and np.array_equal(
            self.weights, other.weights
        )

    def __repr__(self):
        return f"ParticleSet(L={self.size}, N={self.dim})"


@dataclass(frozen=True)
class ReweightResult:
    posterior: ParticleSet
    effective_sample_size: float


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    if w.size and np.all(w == w[0]):
        # avoids 99.99999999999999 for 100 equal weights
        return float(w.size)
    return float(1.0 / math.fsum(w * w))


def xlog(z):
    """Return ``z * log(z)`` with the continuous extension ``xlog(0) = 0``."""
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ValueError("xlog is only defined for nonnegative arguments")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(z > 0, z * np.log(np.where(z > 0, z, 1.0)), 0.0)
    return float(out) if out.ndim == 0 else out


def plog(z):
    """Vector kernel ``z * log(z^T z)``, zero at the origin.

    Works on the last axis, so a stack of difference vectors of shape
    ``(..., N)`` is mapped elementwise.
    """
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("plog requires finite input")
    r2 = np.einsum("...n,...n->...", z, z)[..., None]
    return z * np.log(np.where(r2 > 0, r2, 1.0))


def normalize_log_weights(log_w) -> np.ndarray:
    """Shifted softmax of log weights, floored at ``WEIGHT_FLOOR``."""
    log_w = np.asarray(log_w, dtype=float)
    top = np.max(log_w)
    if not np.isfinite(top):
        raise UpdateImpossibleError("likelihood is zero at every particle location")
    w = np.exp(log_w - top)
    w /= np.sum(w)
    if np.any(w < WEIGHT_FLOOR):
        w = np.maximum(w, WEIGHT_FLOOR)
        w /= np.sum(w)
    return w


def bayes_reweight(prior: ParticleSet, lik) -> ReweightResult:
    """One-shot Bayes update of a Dirac mixture: only the weights change.

    ``lik`` is anything with a vectorised ``log_lik(locations)`` method.
    """
    ll = np.asarray(lik.log_lik(prior.locations), dtype=float)
    with np.errstate(divide="ignore"):
        log_w = np.log(prior.weights) + ll
    w = normalize_log_weights(log_w)
    post = ParticleSet(prior.locations, w)
    return ReweightResult(post, post.ess())


def write_particles_csv(path, particles: ParticleSet) -> None:
    path = Path(path)
    header = ["weight"] + [f"x{i + 1}" for i in range(particles.dim)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for w, x in zip(particles.weights, particles.locations):
            writer.writerow([f"{w:.17g}"] + [f"{v:.17g}" for v in x])


def read_particles_csv(path) -> ParticleSet:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["weight"] or len(rows[0]) < 2:
        raise ValueError(f"{path}: expected header 'weight,x1,...,xN'")
    n = len(rows[0]) - 1
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != n + 1:
            raise ValueError(f"{path}:{lineno}: expected {n + 1} columns, got {len(row)}")
        data.append([float(v) for v in row])
    if not data:
        raise ValueError(f"{path}: no particles")
    arr = np.array(data)
    return ParticleSet(arr[:, 1:], arr[:, 0])
