"""Likelihoods parametrised by artificial time and their progression schedules.

All quantities are kept in log space. A model evaluates

    log f_L(x, gamma) = (g(gamma) - g(gamma_star)) * loglik(x)

where ``gamma_star`` is zero for an ordinary likelihood and marks the amount of
likelihood already absorbed for an effective likelihood.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ContractError


@dataclass(frozen=True)
class Schedule:
    """Exponent schedule ``g(gamma) = gamma ** exponent``.

    ``kind`` is ``"linear"`` (exponent 1), ``"power2"`` (exponent 2) or
    ``"power"`` with a custom exponent ``>= 1``.
    """

    kind: str = "linear"
    exponent: float = 1.0

    def __post_init__(self):
        if self.kind == "linear":
            object.__setattr__(self, "exponent", 1.0)
        elif self.kind == "power2":
            object.__setattr__(self, "exponent", 2.0)
        elif self.kind != "power":
            raise ContractError(f"unknown schedule kind {self.kind!r}")
        if not self.exponent >= 1:
            raise ContractError(f"schedule exponent must be >= 1, got {self.exponent}")

    def g(self, gamma: float) -> float:
        if gamma <= 0:
            return 0.0
        if gamma >= 1:
            return 1.0
        return float(gamma ** self.exponent)

    def g_dot(self, gamma: float) -> float:
        p = self.exponent
        if p == 1.0:
            return 1.0
        return float(p * max(gamma, 0.0) ** (p - 1.0))


def _as_rows(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


@dataclass(frozen=True)
class LikelihoodModel:
    """Log-likelihood evaluator with a homotopy schedule.

    ``log_fn`` maps an ``(L, N)`` array of states to ``L`` log-likelihood values
    (unnormalised; ``-inf`` where the likelihood vanishes).
    """

    log_fn: Callable[[np.ndarray], np.ndarray]
    schedule: Schedule = Schedule()
    gamma_star: float = 0.0
    kind: str = "user"

    def log_lik(self, x):
        rows, single = _as_rows(x)
        out = np.asarray(self.log_fn(rows), dtype=float).reshape(rows.shape[0])
        return float(out[0]) if single else out

    def log_lik_gamma(self, x, gamma: float):
        ll = self.log_lik(x)
        scale = self.schedule.g(gamma) - self.schedule.g(self.gamma_star)
        if scale == 0.0:
            return np.zeros_like(ll) if isinstance(ll, np.ndarray) else 0.0
        return scale * ll

    def lik_gamma(self, x, gamma: float):
        _check_gamma(gamma)
        return np.exp(self.log_lik_gamma(x, gamma))

    def log_ratio(self, x, gamma: float):
        """``d/dgamma f_L(x, gamma) / f_L(x, gamma) = loglik(x) * g'(gamma)``."""
        gd = self.schedule.g_dot(gamma)
        ll = self.log_lik(x)
        if gd == 0.0:
            return np.zeros_like(ll) if isinstance(ll, np.ndarray) else 0.0
        return ll * gd

    def dlik_dgamma(self, x, gamma: float):
        _check_gamma(gamma)
        return self.log_ratio(x, gamma) * self.lik_gamma(x, gamma)


def _check_gamma(gamma):
    if not 0.0 <= gamma <= 1.0:
        raise ContractError(f"gamma must lie in [0, 1], got {gamma}")


def effective_likelihood(base: LikelihoodModel, gamma_star: float) -> LikelihoodModel:
    """Likelihood left over once the part up to ``gamma_star`` has been absorbed."""
    _check_gamma(gamma_star)
    return replace(base, gamma_star=float(gamma_star))


def user_likelihood(log_fn, schedule: Schedule = Schedule()) -> LikelihoodModel:
    return LikelihoodModel(log_fn, schedule, kind="user")


def flat_likelihood(schedule: Schedule = Schedule()) -> LikelihoodModel:
    return LikelihoodModel(lambda x: np.zeros(len(x)), schedule, kind="flat")


# measurement functions, vectorised over rows: (L, N) -> (L, P)

def _range(x):
    p = x[:, :2] if x.shape[1] >= 2 else x
    return np.sqrt(np.sum(p * p, axis=1, keepdims=True))


def _range_bearing(x):
    if x.shape[1] < 2:
        raise ContractError("range-bearing needs at least two state components")
    return np.column_stack([np.hypot(x[:, 0], x[:, 1]), np.arctan2(x[:, 1], x[:, 0])])


def measurement_function(name: str, H=None):
    """Look up a measurement function and the indices of its angular outputs."""
    if name == "identity":
        return (lambda x: x), ()
    if name == "linear":
        H = np.atleast_2d(np.asarray(H, dtype=float))
        return (lambda x: x @ H.T), ()
    if name == "range":
        return _range, ()
    if name == "range-bearing":
        return _range_bearing, (1,)
    if name == "cubic":
        return (lambda x: x ** 3), ()
    raise ContractError(f"unknown measurement function {name!r}")


MEASUREMENT_FUNCTIONS = ("identity", "linear", "range", "range-bearing", "cubic")


def gaussian_likelihood(y, h, noise_cov, schedule: Schedule = Schedule(), angular=()) -> LikelihoodModel:
    """Additive Gaussian noise model ``y = h(x) + v`` with ``v ~ N(0, noise_cov)``.

    Residual components listed in ``angular`` are wrapped to ``(-pi, pi]``.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    cov = np.atleast_2d(np.asarray(noise_cov, dtype=float))
    if cov.shape != (y.size, y.size):
        raise ContractError(f"noise covariance must be {y.size}x{y.size}, got {cov.shape}")
    if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * np.max(np.abs(cov))):
        raise ContractError("noise covariance must be symmetric")
    try:
        factor = cho_factor(cov, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ContractError("noise covariance must be positive definite") from exc
    angular = tuple(angular)

    def log_fn(x):
        hx = np.asarray(h(x), dtype=float).reshape(x.shape[0], y.size)
        r = y[None, :] - hx
        for i in angular:
            r[:, i] = np.angle(np.exp(1j * r[:, i]))
        return -0.5 * np.sum(r * cho_solve(factor, r.T).T, axis=1)

    return LikelihoodModel(log_fn, schedule, kind="gaussian")
