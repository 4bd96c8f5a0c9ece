"""Online bootstrap with Poisson(1) weights.

Each arriving record gets a vector of ``B`` integer weights and updates every
replicate in proportion, so no record has to be kept for resampling. With
cluster-seeded weights every record of a cluster receives the same vector,
which mimics resampling whole clusters.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng
from .stream import DENOM_EPS, RecursiveMean, RlsState, pate_transform, rls_feed
from .types import DegenerateUpdateError, Record, StreamConfig, StreamError

logger = logging.getLogger(__name__)

# domain separator so record positions and cluster hashes never share keys
_IID_DOMAIN = 0x1D1D1D1D00000000


class WeightMode(str, enum.Enum):
    IID = "iid"
    CLUSTER_SEEDED = "cluster"


@dataclass(frozen=True)
class WeightGenerator:
    global_seed: int = 0
    mode: WeightMode = WeightMode.IID

    def key(self, record_index: int, cluster_id: Optional[bytes]) -> int:
        if WeightMode(self.mode) is WeightMode.CLUSTER_SEEDED:
            if cluster_id is None:
                raise StreamError("cluster-seeded weights need a cluster_id")
            item = rng.fnv1a64(cluster_id)
        else:
            item = _IID_DOMAIN ^ (record_index & rng.MASK64)
        return rng.derive_key(self.global_seed, item)


def draw_weights(gen: WeightGenerator, record_index: int, cluster_id: Optional[bytes], B: int) -> np.ndarray:
    """Poisson(1) weight vector of length ``B``.

    In cluster mode the result depends only on the seed, the cluster id and
    the replicate index; ``record_index`` is ignored.
    """
    if B < 1:
        raise StreamError("B must be positive")
    return rng.poisson1(gen.key(record_index, cluster_id), B)


def weighted_mean_update(state: RecursiveMean, z: float, w: int) -> RecursiveMean:
    if w == 0:
        return state
    if w < 0:
        raise StreamError("weights must be non-negative")
    n = state.weight_sum + w
    return RecursiveMean(state.mean + (w / n) * (z - state.mean), n)


class BootstrapMeanEnsemble:
    """``B`` weighted running means held as two arrays."""

    def __init__(self, B: int):
        if B < 1:
            raise StreamError("B must be positive")
        self.B = B
        self.means = np.zeros(B)
        self.weight_sums = np.zeros(B)
        self.n_records = 0

    def update(self, z: float, weights: np.ndarray) -> None:
        w = np.asarray(weights)
        if w.shape != (self.B,):
            raise StreamError(f"expected {self.B} weights, got shape {w.shape}")
        hit = w > 0
        n_new = self.weight_sums[hit] + w[hit]
        self.means[hit] += (w[hit] / n_new) * (z - self.means[hit])
        self.weight_sums[hit] = n_new
        self.n_records += 1

    def replicate(self, b: int) -> RecursiveMean:
        return RecursiveMean(float(self.means[b]), float(self.weight_sums[b]))

    def estimates(self) -> np.ndarray:
        return self.means[self.weight_sums > 0]


def bootstrap_pate_step(
    ens: BootstrapMeanEnsemble, r: Record, gen: WeightGenerator, cfg: StreamConfig
) -> BootstrapMeanEnsemble:
    z = pate_transform(r, cfg)
    ens.update(z, draw_weights(gen, ens.n_records, r.cluster_id, ens.B))
    return ens


def weighted_rls_update(beta: np.ndarray, z_mat: np.ndarray, r: Record, w: int):
    """Weighted recursive least-squares step for one replicate.

    Returns the new ``(beta, z_mat)``; ``w == 0`` returns the inputs.
    """
    if w == 0:
        return beta, z_mat
    x = r.x
    zx = z_mat @ x
    denom = 1.0 + w * (x @ zx)
    if denom <= DENOM_EPS:
        raise DegenerateUpdateError(f"update denominator {denom!r} is not positive")
    z_new = z_mat - (w / denom) * np.outer(zx, zx)
    z_new = 0.5 * (z_new + z_new.T)
    beta_new = beta + (z_new @ x) * (w * (r.y - x @ beta))
    return beta_new, z_new


class BootstrapRlsEnsemble:
    """``B`` weighted RLS replicates sharing one batch start."""

    def __init__(self, shared_init: RlsState, B: int):
        if not shared_init.initialized:
            raise StreamError("shared_init must be an initialized RLS state")
        if B < 1:
            raise StreamError("B must be positive")
        self.B = B
        self.k = shared_init.k
        self.m = shared_init.n_seen
        self.betas = np.tile(shared_init.beta, (B, 1))
        self.z_mats = np.tile(shared_init.z_inv, (B, 1, 1))
        self.weight_sums = np.zeros(B)
        self.n_records = shared_init.n_seen

    def update(self, r: Record, weights: np.ndarray) -> None:
        w = np.asarray(weights)
        if w.shape != (self.B,):
            raise StreamError(f"expected {self.B} weights, got shape {w.shape}")
        hit = np.flatnonzero(w > 0)
        self.n_records += 1
        if hit.size == 0:
            return
        x = r.x
        wh = w[hit].astype(np.float64)
        Z = self.z_mats[hit]
        beta = self.betas[hit]
        zx = Z @ x
        denom = 1.0 + wh * (zx @ x)
        if np.any(denom <= DENOM_EPS):
            raise DegenerateUpdateError("update denominator is not positive")
        Z = Z - (wh / denom)[:, None, None] * (zx[:, :, None] * zx[:, None, :])
        Z = 0.5 * (Z + Z.transpose(0, 2, 1))
        innov = r.y - beta @ x
        self.betas[hit] = beta + (Z @ x) * (wh * innov)[:, None]
        self.z_mats[hit] = Z
        self.weight_sums[hit] += wh

    def estimates(self) -> np.ndarray:
        return self.betas


def bootstrap_rls_step(ens: BootstrapRlsEnsemble, r: Record, gen: WeightGenerator) -> BootstrapRlsEnsemble:
    ens.update(r, draw_weights(gen, ens.n_records, r.cluster_id, ens.B))
    return ens


class OnlineRlsBootstrap:
    """Weighted-RLS bootstrap over a stream, including its batch start.

    Records before the regression is identified go into the shared start
    unweighted; weights are drawn only afterwards.
    """

    def __init__(self, cfg: StreamConfig, B: int, gen: WeightGenerator):
        self.cfg = cfg
        self.B = B
        self.gen = gen
        self._state = RlsState.empty(cfg.k)
        self.ensemble: Optional[BootstrapRlsEnsemble] = None
        self.n_seen = 0

    def update(self, r: Record) -> None:
        if self.ensemble is None:
            self._state = rls_feed(self._state, r, self.cfg)
            if self._state.initialized:
                self.ensemble = BootstrapRlsEnsemble(self._state, self.B)
                self._state = None
        else:
            bootstrap_rls_step(self.ensemble, r, self.gen)
        self.n_seen += 1

    @property
    def init_fraction(self) -> float:
        if self.ensemble is None or self.n_seen == 0:
            return 1.0
        return self.ensemble.m / self.n_seen


@dataclass
class BootstrapSummary:
    variance: object
    ci_low: object
    ci_high: object
    B_effective: int
    level: float
    center: object = None

    @property
    def percentile_ci(self):
        return self.ci_low, self.ci_high


def summarize(ens, level: float = 0.95) -> BootstrapSummary:
    """Replicate variance and percentile interval.

    Mean ensembles give scalars; RLS ensembles give a ``k x k`` covariance
    and per-coefficient interval arrays. Only replicates that received any
    weight count.
    """
    if not 0.0 < level < 1.0:
        raise StreamError("level must lie in (0, 1)")
    if ens.B < 2:
        raise StreamError("B must be at least 2")
    alpha = 1.0 - level
    if isinstance(ens, BootstrapMeanEnsemble):
        est = ens.estimates()
        if est.size < 2:
            raise StreamError(f"only {est.size} replicates received weight")
        lo, hi = np.quantile(est, [alpha / 2, 1 - alpha / 2])
        return BootstrapSummary(float(np.var(est - est[0], ddof=1)), float(lo), float(hi), int(est.size), level,
                                float(np.median(est)))
    est = ens.betas[ens.weight_sums > 0] if np.any(ens.weight_sums > 0) else ens.betas
    B_eff = int(np.count_nonzero(ens.weight_sums > 0)) if np.any(ens.weight_sums > 0) else ens.B
    if B_eff < 2:
        raise StreamError(f"only {B_eff} replicates received weight")
    lo, hi = np.quantile(est, [alpha / 2, 1 - alpha / 2], axis=0)
    # shifting by one replicate is exact for identical replicates and
    # better conditioned when the spread is tiny relative to the level
    cov = np.atleast_2d(np.cov(est - est[0], rowvar=False, ddof=1))
    return BootstrapSummary(cov, lo, hi, B_eff, level, np.median(est, axis=0))


def understatement_warning(init_count: int, n: int) -> Optional[dict]:
    if init_count <= 0 or n <= 0:
        return None
    ratio = init_count / n
    msg = (f"replicates share a batch start fitted on {init_count} of {n} records "
           f"(m/n = {ratio:.3g}); bootstrap variance is understated")
    logger.warning(msg)
    return {"code": "BOOTSTRAP_INIT_UNDERSTATES_VARIANCE", "message": msg, "m_over_n": ratio}


def se_from_variance(v: float) -> float:
    return math.sqrt(max(v, 0.0))
