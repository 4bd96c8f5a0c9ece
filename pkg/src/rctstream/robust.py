"""Robust covariance assembly from aggregated pieces.

* cluster sandwich: bread = (X'X)^-1 from the recursive fit, meat = sum of
  outer products of per-cluster score vectors u_j = X_j' e_j
* heteroscedasticity-robust meat accumulated from standardized recursive
  residuals, so no final-fit residuals (and no records) are needed
* delta-method variance of a ratio-of-sums mean from per-cluster
  (size, sum) moments
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .stream import DENOM_EPS, RlsState
from .types import DegenerateUpdateError, Record, StreamError, VarianceReport


@dataclass
class ClusterContribution:
    u: np.ndarray

    def __post_init__(self) -> None:
        self.u = np.array(self.u, dtype=np.float64)
        if self.u.ndim != 1 or not np.all(np.isfinite(self.u)):
            raise StreamError("contribution must be a finite 1-D vector")


class SandwichAccumulator:
    """Running meat ``sum_j u_j u_j'`` plus the bread it is sandwiched by."""

    def __init__(self, k: int, bread: Optional[np.ndarray] = None):
        self.k = k
        self.meat = np.zeros((k, k))
        self.bread = None if bread is None else np.array(bread, dtype=np.float64)
        self.j_count = 0

    def absorb(self, c: ClusterContribution) -> "SandwichAccumulator":
        u = c.u
        if u.shape != (self.k,):
            raise StreamError(f"contribution has length {u.shape[0]}, expected {self.k}")
        self.meat += np.outer(u, u)
        self.j_count += 1
        return self

    def assemble(self) -> VarianceReport:
        if self.bread is None:
            raise StreamError("bread (inverse Gram) has not been set")
        if self.j_count < 2:
            raise StreamError(f"need at least 2 clusters, have {self.j_count}")
        sigma = self.bread @ self.meat @ self.bread
        return VarianceReport(sigma=0.5 * (sigma + sigma.T), method="cluster-robust", j_count=self.j_count)


def absorb_contribution(acc: SandwichAccumulator, c: ClusterContribution) -> SandwichAccumulator:
    return acc.absorb(c)


def assemble_sandwich(acc: SandwichAccumulator) -> VarianceReport:
    return acc.assemble()


class HrseAccumulator:
    """Heteroscedasticity-robust meat built from recursive residuals.

    Each record contributes ``x x' e~^2`` with
    ``e~ = (y - x'beta) / sqrt(1 + x'Zx)`` taken from the state *before* the
    record is absorbed.
    """

    def __init__(self, k: int):
        self.k = k
        self.meat = np.zeros((k, k))
        self.n = 0

    def update(self, r: Record, state_before: RlsState) -> "HrseAccumulator":
        if not state_before.initialized:
            raise StreamError("HRSE update needs an initialized regression state")
        x = r.x
        denom = 1.0 + x @ state_before.z_inv @ x
        if denom <= DENOM_EPS:
            raise DegenerateUpdateError(f"update denominator {denom!r} is not positive")
        e2 = (r.y - x @ state_before.beta) ** 2 / denom
        self.meat += np.outer(x, x) * e2
        self.n += 1
        return self

    def add_fitted(self, X: np.ndarray, resid: np.ndarray) -> "HrseAccumulator":
        """Fold in records whose residuals come from a batch fit (the start buffer)."""
        self.meat += (X * (resid ** 2)[:, None]).T @ X
        self.n += X.shape[0]
        return self

    def assemble(self, bread: np.ndarray) -> VarianceReport:
        sigma = bread @ self.meat @ bread
        return VarianceReport(sigma=0.5 * (sigma + sigma.T), method="hrse")


def hrse_update(acc: HrseAccumulator, r: Record, state_before: RlsState) -> HrseAccumulator:
    return acc.update(r, state_before)


def delta_ratio_variance(J: int, n_bar: float, s_bar: float, var_n: float, var_s: float, cov_sn: float) -> float:
    """Delta-method variance of ``sum(s_j) / sum(n_j)`` over ``J`` clusters."""
    if J < 2:
        raise StreamError("need at least 2 clusters")
    if n_bar <= 0:
        raise StreamError("mean cluster size must be positive")
    ratio = s_bar / n_bar
    v = (var_s + ratio * ratio * var_n - 2.0 * ratio * cov_sn) / (J * n_bar * n_bar)
    return max(v, 0.0)


@dataclass
class _CoMoments:
    J: int = 0
    n_bar: float = 0.0
    s_bar: float = 0.0
    m2_n: float = 0.0
    m2_s: float = 0.0
    c_sn: float = 0.0

    def add(self, n_j: float, s_j: float) -> None:
        self.J += 1
        dn = n_j - self.n_bar
        self.n_bar += dn / self.J
        ds = s_j - self.s_bar
        self.s_bar += ds / self.J
        self.m2_n += dn * (n_j - self.n_bar)
        self.m2_s += ds * (s_j - self.s_bar)
        self.c_sn += dn * (s_j - self.s_bar)

    def variance(self) -> float:
        if self.J < 2:
            raise StreamError(f"need at least 2 clusters, have {self.J}")
        dd = self.J - 1
        return delta_ratio_variance(self.J, self.n_bar, self.s_bar, self.m2_n / dd, self.m2_s / dd, self.c_sn / dd)

    @property
    def mean(self) -> float:
        return self.s_bar / self.n_bar


@dataclass
class DeltaMethodAccumulator:
    """Per-arm streaming moments of completed clusters' (size, outcome sum)."""

    arms: dict = field(default_factory=lambda: {0: _CoMoments(), 1: _CoMoments()})

    def add_cluster(self, n_j: int, s_j: float, d: int) -> "DeltaMethodAccumulator":
        if d not in (0, 1):
            raise StreamError("treatment must be 0 or 1")
        if n_j <= 0:
            raise StreamError("cluster size must be positive")
        if not math.isfinite(s_j):
            raise StreamError("non-finite cluster sum")
        self.arms[d].add(float(n_j), float(s_j))
        return self

    def arm_variance(self, d: int) -> float:
        return self.arms[d].variance()

    def arm_mean(self, d: int) -> float:
        return self.arms[d].mean

    def effect(self) -> float:
        return self.arm_mean(1) - self.arm_mean(0)

    def effect_variance(self) -> float:
        return self.arm_variance(0) + self.arm_variance(1)


def delta_method_variance(acc: DeltaMethodAccumulator) -> float:
    return acc.effect_variance()
