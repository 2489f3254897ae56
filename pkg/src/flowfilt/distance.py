"""Generalized Cramér-von Mises distance between Dirac mixtures.

The distance uses the kernel ``xlog(||a - b||^2)`` plus a penalty on the
difference of the means. Gradient and Hessian are taken with respect to the
locations of the approximating mixture; the reference mixture is held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dirac import ParticleSet, plog, xlog
from .errors import CoincidenceError, ContractError

COINCIDENCE_RADIUS = 1e-14
JITTER = 1e-12
_CHUNK = 256


@dataclass(frozen=True)
class DistanceParams:
    """Penalty constants. ``K2`` defaults to ``2 * (K1 - 2)``."""

    K1: float = 100.0
    K2: float = field(default=None)

    def __post_init__(self):
        if not self.K1 > 2:
            raise ContractError(f"K1 must exceed 2, got {self.K1}")
        if self.K2 is None:
            object.__setattr__(self, "K2", 2.0 * (self.K1 - 2.0))
        if not self.K2 > 0:
            raise ContractError(f"K2 must be positive, got {self.K2}")


@dataclass(frozen=True)
class DistanceReport:
    total: float
    term_ref_ref: float
    term_cross: float
    term_approx: float
    term_mean: float


def _check_dims(approx: ParticleSet, ref: ParticleSet):
    if approx.dim != ref.dim:
        raise ContractError(f"dimension mismatch: approx N={approx.dim}, ref N={ref.dim}")


def _pair_sum(xa, wa, xb, wb) -> float:
    """``sum_ij wa_i wb_j xlog(||xa_i - xb_j||^2)`` over fixed row chunks."""
    partial = []
    for start in range(0, xa.shape[0], _CHUNK):
        d = xa[start:start + _CHUNK, None, :] - xb[None, :, :]
        r2 = np.einsum("...n,...n->...", d, d)
        partial.append(float(wa[start:start + _CHUNK] @ (xlog(r2) @ wb)))
    return math.fsum(partial)


def ref_ref_term(ref: ParticleSet) -> float:
    return _pair_sum(ref.locations, ref.weights, ref.locations, ref.weights)


def distance(approx: ParticleSet, ref: ParticleSet, params: DistanceParams = DistanceParams(),
             ref_ref: float | None = None) -> DistanceReport:
    """Evaluate the distance and its four constituent terms.

    ``ref_ref`` may carry a precomputed reference self-term, which is the
    expensive ``O(M^2)`` part when the reference is large and fixed.
    """
    _check_dims(approx, ref)
    d_rr = ref_ref_term(ref) if ref_ref is None else ref_ref
    d_xr = _pair_sum(approx.locations, approx.weights, ref.locations, ref.weights)
    d_xx = _pair_sum(approx.locations, approx.weights, approx.locations, approx.weights)
    dm = approx.mean() - ref.mean()
    d_e = float(dm @ dm)
    total = d_rr - 2.0 * d_xr + d_xx + params.K1 * d_e
    return DistanceReport(total, d_rr, d_xr, d_xx, d_e)


def gradient(approx: ParticleSet, ref: ParticleSet, params: DistanceParams = DistanceParams()) -> np.ndarray:
    """Stacked gradient ``[G_1; ...; G_L]`` of the distance w.r.t. approx locations."""
    _check_dims(approx, ref)
    x, w = approx.locations, approx.weights
    xr, wr = ref.locations, ref.weights
    # plog vanishes on the self pairs, so the i == k exclusion is automatic
    own = np.einsum("i,kin->kn", w, plog(x[:, None, :] - x[None, :, :]))
    cross = np.einsum("j,kjn->kn", wr, plog(x[:, None, :] - xr[None, :, :]))
    dm = w @ x - wr @ xr
    g = 4.0 * w[:, None] * (own - cross) + params.K2 * w[:, None] * dm[None, :]
    return g.ravel()


def _kernel_blocks(d, jitter=False):
    """Blocks ``I log r^2 + 2 d d^T / r^2`` for a stack of differences ``(..., N)``.

    Returns the blocks and a mask of pairs closer than the coincidence radius.
    With ``jitter`` the squared distance is offset by ``JITTER`` so coincident
    pairs stay finite.
    """
    n = d.shape[-1]
    r2 = np.einsum("...n,...n->...", d, d)
    close = r2 < COINCIDENCE_RADIUS ** 2
    if jitter:
        r2 = r2 + JITTER
    safe = np.where(close & (r2 == 0), 1.0, r2)
    blocks = np.log(safe)[..., None, None] * np.eye(n) + 2.0 * d[..., :, None] * d[..., None, :] / safe[..., None, None]
    return blocks, close


def _own_blocks(x, w, K2, jitter):
    """Off-diagonal blocks ``H_kl`` (k != l) plus the own-set part of ``H_kk``."""
    L, n = x.shape
    d = x[:, None, :] - x[None, :, :]
    kern, close = _kernel_blocks(d, jitter=jitter)
    off = ~np.eye(L, dtype=bool)
    if not jitter and np.any(close & off):
        k, l = np.argwhere(close & off)[0]
        raise CoincidenceError(f"particles {k} and {l} coincide; the log-kernel Hessian is singular there")
    kern[~off] = 0.0
    ww = w[:, None] * w[None, :]
    blocks = ww[:, :, None, None] * (K2 * np.eye(n) - 4.0 * kern)
    own_diag = 4.0 * w[:, None, None] * np.einsum("i,kiab->kab", w, kern)
    idx = np.arange(L)
    blocks[idx, idx] = K2 * (w * w)[:, None, None] * np.eye(n)
    return blocks, own_diag


def _assemble(blocks) -> np.ndarray:
    L, _, n, _ = blocks.shape
    h = blocks.transpose(0, 2, 1, 3).reshape(L * n, L * n)
    return 0.5 * (h + h.T)


def cross_diag_blocks(x, w, xr, wr, anchor_eps2=None):
    """``4 w_k sum_j wr_j {I log r^2 + 2 d d^T / r^2}`` for every approx particle k.

    Coincident approx/reference pairs are skipped. With ``anchor_eps2`` (one
    value per particle, requires ``len(xr) == len(x)``) the pair of particle k
    with reference k uses the smoothed kernel instead; see ``flow``.
    """
    n = x.shape[1]
    d = x[:, None, :] - xr[None, :, :]
    r2 = np.einsum("...n,...n->...", d, d)
    close = r2 < COINCIDENCE_RADIUS ** 2
    wgt = np.where(close, 0.0, wr[None, :])
    safe = np.where(close, 1.0, r2)
    if anchor_eps2 is not None:
        idx = np.arange(x.shape[0])
        wgt[idx, idx] = 0.0
    logsum = np.sum(wgt * np.log(safe), axis=1)
    outer = np.einsum("kja,kjb->kab", (2.0 * wgt / safe)[..., None] * d, d)
    out = logsum[:, None, None] * np.eye(n) + outer
    if anchor_eps2 is not None:
        out += wr[:, None, None] * smoothed_self_kernel(np.einsum("kkn->kn", d), anchor_eps2)
    return 4.0 * w[:, None, None] * out


def smoothed_self_kernel(d, eps2):
    """Kernel ``I log(r^2 + e) + 2 (d d^T + e I / N) / (r^2 + e)`` with ``e = eps2``.

    At ``d = 0`` it reduces to ``(log e + 2 / N) I``, the direction average of
    the log kernel at radius ``sqrt(e)``.
    """
    n = d.shape[-1]
    eps2 = np.broadcast_to(np.asarray(eps2, dtype=float), d.shape[:-1])
    s = np.einsum("...n,...n->...", d, d) + eps2
    eye = np.eye(n)
    return (np.log(s)[..., None, None] * eye
            + 2.0 * (d[..., :, None] * d[..., None, :] + (eps2 / n)[..., None, None] * eye) / s[..., None, None])


def hessian(approx: ParticleSet, ref: ParticleSet, params: DistanceParams = DistanceParams(),
            jitter: bool = False) -> np.ndarray:
    """Full ``LN x LN`` Hessian of the distance w.r.t. the approx locations.

    Raises ``CoincidenceError`` when two approx particles coincide, unless
    ``jitter`` is set. Approx/reference pairs at the same location are left out
    of the diagonal blocks (the kernel has no finite second derivative there).
    """
    _check_dims(approx, ref)
    x, w = approx.locations, approx.weights
    blocks, own_diag = _own_blocks(x, w, params.K2, jitter)
    idx = np.arange(x.shape[0])
    blocks[idx, idx] += own_diag - cross_diag_blocks(x, w, ref.locations, ref.weights)
    return _assemble(blocks)


def gradient_and_hessian(approx: ParticleSet, ref: ParticleSet, params: DistanceParams = DistanceParams(),
                         jitter: bool = False):
    """``(gradient, hessian)`` sharing one pass over the approx/reference pairs."""
    _check_dims(approx, ref)
    x, w = approx.locations, approx.weights
    xr, wr = ref.locations, ref.weights
    n = x.shape[1]
    d = x[:, None, :] - xr[None, :, :]
    r2 = np.einsum("...n,...n->...", d, d)
    lg = np.log(np.where(r2 > 0, r2, 1.0))
    cross = np.einsum("kj,kjn->kn", wr[None, :] * lg, d)
    own = np.einsum("i,kin->kn", w, plog(x[:, None, :] - x[None, :, :]))
    dm = w @ x - wr @ xr
    g = 4.0 * w[:, None] * (own - cross) + params.K2 * w[:, None] * dm[None, :]

    close = r2 < COINCIDENCE_RADIUS ** 2
    wgt = np.where(close, 0.0, wr[None, :])
    logsum = np.sum(wgt * lg, axis=1)
    outer = np.einsum("kja,kjb->kab", (2.0 * wgt / np.where(close, 1.0, r2))[..., None] * d, d)
    diag = 4.0 * w[:, None, None] * (logsum[:, None, None] * np.eye(n) + outer)
    blocks, own_diag = _own_blocks(x, w, params.K2, jitter)
    idx = np.arange(x.shape[0])
    blocks[idx, idx] += own_diag - diag
    return g.ravel(), _assemble(blocks)


def hessian_recursive(approx: ParticleSet, params: DistanceParams = DistanceParams(),
                      jitter: bool = False) -> np.ndarray:
    """Hessian for the recursive flow, where the reference is the approx set itself.

    The own-set and reference parts of the diagonal blocks cancel, leaving
    ``K2 w_k^2 I`` there; off-diagonal blocks are those of ``hessian``.
    """
    blocks, _ = _own_blocks(approx.locations, approx.weights, params.K2, jitter)
    return _assemble(blocks)
