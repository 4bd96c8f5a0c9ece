"""Constant-memory recursive estimators.

Running means, the inverse-probability contrast for the average treatment
effect, and recursive least squares with a running inverse Gram matrix and
running sum of squared residuals. Each update consumes one record and keeps
nothing from it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg

from .types import (
    DegenerateUpdateError,
    DfDivisor,
    EffectEstimate,
    EmptyStreamError,
    NotIdentifiableError,
    Record,
    StreamConfig,
    StreamError,
    VarianceReport,
)

DENOM_EPS = 1e-12
# reciprocal condition bound on the pivoted R factor for a batch start
_RCOND_MIN = 1e-10
# the moment start keeps accumulating (at no retention cost) until this holds
_GRAM_COND_MAX = 1e8


class RecursiveMean(NamedTuple):
    mean: float = 0.0
    weight_sum: float = 0.0


def mean_update(state: RecursiveMean, z: float) -> RecursiveMean:
    if not math.isfinite(z):
        raise StreamError(f"non-finite observation {z!r}")
    mean, t = state
    t += 1.0
    return RecursiveMean(mean + (z - mean) / t, t)


def mean_batch_update(state: RecursiveMean, batch_sum: float, batch_count: int) -> RecursiveMean:
    """Fold a whole batch, given only its sum and size, into the running mean."""
    if batch_count <= 0:
        raise StreamError("batch_count must be positive")
    if not math.isfinite(batch_sum):
        raise StreamError(f"non-finite batch sum {batch_sum!r}")
    t = state.weight_sum + batch_count
    return RecursiveMean(state.mean + (batch_sum - batch_count * state.mean) / t, t)


def pate_transform(r: Record, cfg: StreamConfig) -> float:
    """Inverse-probability contrast whose mean is unbiased for the effect."""
    d = r.x[1]
    return d * r.y / cfg.pi1 - (1.0 - d) * r.y / (1.0 - cfg.pi1)


def pate_point_estimate(state: RecursiveMean) -> EffectEstimate:
    if state.weight_sum <= 0:
        raise EmptyStreamError("no records have been observed")
    return EffectEstimate(tau_hat=state.mean, n=int(state.weight_sum), method="pate-ht")


@dataclass
class RlsState:
    """Everything retained by recursive least squares.

    Before ``initialized`` the state holds either the raw ``init_buffer``
    (batch start with ``init_m > 0``) or the running sufficient statistics
    ``gram``/``xty``/``yty`` (``init_m == 0``). Both are dropped at
    initialization.
    """

    k: int
    beta: np.ndarray = None
    z_inv: np.ndarray = None
    ssr: float = 0.0
    n_seen: int = 0
    initialized: bool = False
    init_buffer: list = field(default_factory=list)
    gram: Optional[np.ndarray] = None
    xty: Optional[np.ndarray] = None
    yty: float = 0.0

    @classmethod
    def empty(cls, k: int) -> "RlsState":
        return cls(k=k, beta=np.zeros(k), z_inv=np.full((k, k), np.nan))


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def rls_init(buffer: list) -> RlsState:
    """Batch least-squares start from the first records of the stream.

    The inverse Gram matrix comes from a column-pivoted QR of the stacked
    design. Raises :class:`NotIdentifiableError` when the buffered design
    is rank deficient.
    """
    if not buffer:
        raise NotIdentifiableError("empty initialization buffer")
    X = np.vstack([r.x for r in buffer])
    y = np.array([r.y for r in buffer])
    m, k = X.shape
    if m < k:
        raise NotIdentifiableError(f"{m} records cannot identify {k} coefficients; buffer more records")
    q, r_fac, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r_fac))
    if diag[0] == 0.0 or diag[-1] / diag[0] < _RCOND_MIN:
        raise NotIdentifiableError("buffered design is rank deficient; buffer more records")
    coef_p = scipy.linalg.solve_triangular(r_fac, q.T @ y)
    r_inv = scipy.linalg.solve_triangular(r_fac, np.eye(k))
    z_p = r_inv @ r_inv.T
    beta = np.empty(k)
    beta[piv] = coef_p
    z_inv = np.empty((k, k))
    z_inv[np.ix_(piv, piv)] = z_p
    resid = X @ beta - y
    return RlsState(
        k=k,
        beta=beta,
        z_inv=_symmetrize(z_inv),
        ssr=float(resid @ resid),
        n_seen=m,
        initialized=True,
    )


def _init_from_moments(state: RlsState) -> Optional[RlsState]:
    gram = state.gram
    if state.n_seen < state.k or np.linalg.cond(gram) > _GRAM_COND_MAX:
        return None
    z_inv = _symmetrize(scipy.linalg.inv(gram))
    beta = z_inv @ state.xty
    ssr = max(state.yty - float(beta @ state.xty), 0.0)
    return RlsState(k=state.k, beta=beta, z_inv=z_inv, ssr=ssr, n_seen=state.n_seen, initialized=True)


def rls_update(state: RlsState, r: Record) -> RlsState:
    """One recursive least-squares step.

    Order matters: the residual sum uses the pre-update coefficients and
    inverse Gram, then the inverse Gram is downdated, then the
    coefficients move along the new inverse Gram.
    """
    if not state.initialized:
        raise StreamError("rls_update requires an initialized state")
    x = r.x
    if x.shape[0] != state.k:
        raise StreamError(f"record has {x.shape[0]} features, stream has {state.k}")
    zx = state.z_inv @ x
    denom = 1.0 + x @ zx
    if denom <= DENOM_EPS:
        raise DegenerateUpdateError(f"update denominator {denom!r} is not positive")
    innov = r.y - x @ state.beta
    ssr = state.ssr + innov * innov / denom
    z_new = _symmetrize(state.z_inv - np.outer(zx, zx) / denom)
    beta = state.beta + (z_new @ x) * innov
    return RlsState(k=state.k, beta=beta, z_inv=z_new, ssr=ssr, n_seen=state.n_seen + 1, initialized=True)


def rls_feed(state: RlsState, r: Record, cfg: StreamConfig) -> RlsState:
    """Route a record through initialization or the recursive update."""
    if state.initialized:
        return rls_update(state, r)
    if r.x.shape[0] != state.k:
        raise StreamError(f"record has {r.x.shape[0]} features, stream has {state.k}")
    if cfg.init_m == 0:
        gram = np.zeros((state.k, state.k)) if state.gram is None else state.gram
        xty = np.zeros(state.k) if state.xty is None else state.xty
        nxt = replace(
            state,
            gram=gram + np.outer(r.x, r.x),
            xty=xty + r.x * r.y,
            yty=state.yty + r.y * r.y,
            n_seen=state.n_seen + 1,
        )
        return _init_from_moments(nxt) or nxt
    buffer = state.init_buffer + [r]
    if len(buffer) < cfg.init_m:
        return replace(state, init_buffer=buffer, n_seen=len(buffer))
    try:
        return rls_init(buffer)
    except NotIdentifiableError:
        if len(buffer) >= cfg.buffer_cap:
            raise NotIdentifiableError(
                f"design still rank deficient after {len(buffer)} records (cap {cfg.buffer_cap})"
            ) from None
        return replace(state, init_buffer=buffer, n_seen=len(buffer))


def dof_for(n: int, k: int, divisor: DfDivisor) -> int:
    return n - k if DfDivisor(divisor) is DfDivisor.N_MINUS_K else n - k - 1


def iid_variance(state: RlsState, cfg: StreamConfig) -> VarianceReport:
    if not state.initialized:
        raise NotIdentifiableError("regression is not initialized")
    dof = dof_for(state.n_seen, state.k, cfg.df_divisor)
    if dof <= 0:
        raise StreamError(f"degrees of freedom {dof} must be positive")
    sigma2 = state.ssr / dof
    return VarianceReport(sigma=state.z_inv * sigma2, method="iid", dof=dof, sigma2_hat=sigma2)
