"""Stream drivers that combine the recursive pieces into effect estimates."""

from __future__ import annotations

import math
from statistics import NormalDist
from typing import Optional

import numpy as np

from .robust import HrseAccumulator
from .stream import RecursiveMean, RlsState, iid_variance, mean_update, pate_transform, rls_feed
from .types import EffectEstimate, EmptyStreamError, Record, StreamConfig, StreamError, VarianceReport


def z_quantile(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise StreamError("level must lie in (0, 1)")
    return NormalDist().inv_cdf(0.5 + level / 2.0)


def _arm_flags(n_treated: int, n_control: int) -> tuple:
    flags = []
    if n_treated == 0:
        flags.append("NO_TREATED_RECORDS")
    if n_control == 0:
        flags.append("NO_CONTROL_RECORDS")
    return tuple(flags)


class PateStream:
    """Running inverse-probability estimate of the average effect.

    Besides the running mean of the contrast, keeps its running sum of
    squared deviations so a standard error is available at any time.
    """

    def __init__(self, cfg: StreamConfig):
        self.cfg = cfg
        self.state = RecursiveMean()
        self._m2 = 0.0
        self.n_treated = 0

    def update(self, r: Record) -> None:
        z = pate_transform(r, self.cfg)
        prev = self.state.mean
        self.state = mean_update(self.state, z)
        self._m2 += (z - prev) * (z - self.state.mean)
        self.n_treated += r.d

    @property
    def n(self) -> int:
        return int(self.state.weight_sum)

    def estimate(self, level: float = 0.95) -> EffectEstimate:
        if self.n == 0:
            raise EmptyStreamError("no records have been observed")
        tau = self.state.mean
        flags = _arm_flags(self.n_treated, self.n - self.n_treated)
        if flags or self.n < 2:
            return EffectEstimate(tau_hat=tau, n=self.n, method="pate-ht", flags=flags)
        se = math.sqrt(self._m2 / (self.n - 1) / self.n)
        q = z_quantile(level)
        return EffectEstimate(tau, self.n, "pate-ht", se, tau - q * se, tau + q * se)


class RegressionStream:
    """Recursive least squares plus optional robust meat accumulation.

    The coefficient on the treatment indicator (index 1) is the effect.
    """

    def __init__(self, cfg: StreamConfig, hrse: bool = False):
        self.cfg = cfg
        self.state = RlsState.empty(cfg.k)
        self.hrse = HrseAccumulator(cfg.k) if hrse else None
        self.n_treated = 0
        self.n = 0

    def update(self, r: Record) -> None:
        before = self.state
        if before.initialized and self.hrse is not None:
            self.hrse.update(r, before)
        self.state = rls_feed(before, r, self.cfg)
        if not before.initialized and self.state.initialized and self.hrse is not None and before.init_buffer:
            rows = before.init_buffer + [r]
            X = np.vstack([b.x for b in rows])
            y = np.array([b.y for b in rows])
            self.hrse.add_fitted(X, X @ self.state.beta - y)
        self.n_treated += r.d
        self.n += 1

    @property
    def beta(self) -> np.ndarray:
        if not self.state.initialized:
            raise EmptyStreamError("regression not yet identified")
        return self.state.beta

    @property
    def bread(self) -> np.ndarray:
        if not self.state.initialized:
            raise EmptyStreamError("regression not yet identified")
        return self.state.z_inv

    def variance(self, method: str = "iid") -> VarianceReport:
        if method == "iid":
            return iid_variance(self.state, self.cfg)
        if method == "hrse":
            if self.hrse is None:
                raise StreamError("stream was not set up to accumulate HRSE")
            return self.hrse.assemble(self.bread)
        raise StreamError(f"unknown variance method {method!r}")

    def estimate(self, method: str = "iid", level: float = 0.95,
                 report: Optional[VarianceReport] = None) -> EffectEstimate:
        if self.n == 0:
            raise EmptyStreamError("no records have been observed")
        tau = float(self.beta[1])
        flags = _arm_flags(self.n_treated, self.n - self.n_treated)
        if flags:
            return EffectEstimate(tau_hat=tau, n=self.n, method=f"rls-{method}", flags=flags)
        rep = report if report is not None else self.variance(method)
        se = float(math.sqrt(max(rep.sigma[1, 1], 0.0)))
        q = z_quantile(level)
        return EffectEstimate(tau, self.n, f"rls-{rep.method}", se, tau - q * se, tau + q * se)
