"""Synthetic experiment streams with known ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import rng
from .types import Record, StreamError

_PURPOSES = {
    "treat": 1,
    "perm": 2,
    "cov": 3,
    "noise": 4,
    "cluster_effect": 5,
    "cluster_assign": 6,
}


@dataclass(frozen=True)
class ClusterSpec:
    """``assignment="balanced"`` gives clusters of near-equal size;
    ``"random"`` assigns each record to a uniformly drawn cluster, which
    varies the sizes (empty clusters simply do not appear)."""

    J: int
    icc: float = 0.0
    assignment: str = "balanced"
    treat_by_cluster: bool = True


@dataclass(frozen=True)
class DgpSpec:
    """Linear outcome model for a randomized experiment.

    ``beta`` holds the intercept followed by the ``k - 2`` covariate
    coefficients (the treatment coefficient is ``tau``). Covariates are
    standard normal. ``hetero_factor`` scales the noise SD of treated units.
    """

    n: int
    k: int = 2
    tau: float = 0.0
    beta: tuple = (0.0,)
    pi1: float = 0.5
    noise_sd: float = 1.0
    hetero_factor: float = 1.0
    cluster_spec: Optional[ClusterSpec] = None
    seed: int = 0
    exact_count: bool = False

    def __post_init__(self) -> None:
        if self.n < 1:
            raise StreamError("n must be positive")
        if self.k < 2:
            raise StreamError("k must be at least 2")
        if len(self.beta) != self.k - 1:
            raise StreamError(f"beta needs intercept plus {self.k - 2} covariate coefficients")
        if not 0.0 < self.pi1 < 1.0:
            raise StreamError("pi1 must lie strictly between 0 and 1")
        if self.noise_sd < 0 or self.hetero_factor < 0:
            raise StreamError("noise_sd and hetero_factor must be non-negative")
        cs = self.cluster_spec
        if cs is not None:
            if cs.J < 1 or cs.J > self.n:
                raise StreamError("cluster count must lie in [1, n]")
            if not 0.0 <= cs.icc < 1.0:
                raise StreamError("icc must lie in [0, 1)")
            if cs.assignment not in ("balanced", "random"):
                raise StreamError(f"unknown cluster assignment {cs.assignment!r}")


@dataclass
class GeneratedData:
    y: np.ndarray
    X: np.ndarray
    cluster_index: Optional[np.ndarray] = None
    cluster_ids: Optional[list] = field(default=None, repr=False)

    @property
    def d(self) -> np.ndarray:
        return self.X[:, 1]

    def records(self) -> Iterator[Record]:
        for i in range(self.y.shape[0]):
            cid = None if self.cluster_ids is None else self.cluster_ids[self.cluster_index[i]]
            yield Record(self.y[i], self.X[i], cid)


def _key(spec: DgpSpec, purpose: str) -> int:
    return rng.derive_key(spec.seed, _PURPOSES[purpose])


def _assign(spec: DgpSpec, units: int) -> np.ndarray:
    if spec.exact_count:
        n_treat = int(round(units * spec.pi1))
        u = rng.uniforms(_key(spec, "perm"), 0, units)
        order = np.argsort(u, kind="stable")
        d = np.zeros(units)
        d[order[:n_treat]] = 1.0
        return d
    u = rng.uniforms(_key(spec, "treat"), 0, units)
    return (u < spec.pi1).astype(np.float64)


def cluster_label(j: int) -> bytes:
    return b"c%06d" % j


def generate_arrays(spec: DgpSpec) -> GeneratedData:
    n, k = spec.n, spec.k
    X = np.empty((n, k))
    X[:, 0] = 1.0
    if k > 2:
        X[:, 2:] = rng.standard_normals(_key(spec, "cov"), n * (k - 2)).reshape(n, k - 2)
    cs = spec.cluster_spec
    cluster_index = None
    if cs is not None:
        if cs.assignment == "balanced":
            cluster_index = (np.arange(n) * cs.J) // n
        else:
            u = rng.uniforms(_key(spec, "cluster_assign"), 0, n)
            cluster_index = np.minimum((u * cs.J).astype(np.int64), cs.J - 1)
    if cs is not None and cs.treat_by_cluster:
        X[:, 1] = _assign(spec, cs.J)[cluster_index]
    else:
        X[:, 1] = _assign(spec, n)
    d = X[:, 1]
    beta = np.asarray(spec.beta, dtype=np.float64)
    mean = beta[0] + spec.tau * d
    if k > 2:
        mean = mean + X[:, 2:] @ beta[1:]
    sd = spec.noise_sd * np.where(d == 1.0, spec.hetero_factor, 1.0)
    eps = rng.standard_normals(_key(spec, "noise"), n) * sd
    y = mean + eps
    if cs is not None and cs.icc > 0:
        cluster_sd = spec.noise_sd * math.sqrt(cs.icc / (1.0 - cs.icc))
        effects = rng.standard_normals(_key(spec, "cluster_effect"), cs.J) * cluster_sd
        y = y + effects[cluster_index]
    ids = None if cs is None else [cluster_label(j) for j in range(cs.J)]
    return GeneratedData(y=y, X=X, cluster_index=cluster_index, cluster_ids=ids)


def generate(spec: DgpSpec) -> Iterator[Record]:
    """Yield the stream described by ``spec``; identical on every call."""
    return generate_arrays(spec).records()


def analytic_pate_variance(spec: DgpSpec) -> float:
    """Closed-form ``Var(z)`` of the inverse-probability contrast.

    Assumes Bernoulli assignment per record and no clustering.
    """
    if spec.exact_count or spec.cluster_spec is not None:
        raise StreamError("closed form covers independent Bernoulli assignment only")
    beta = np.asarray(spec.beta, dtype=np.float64)
    cov_var = float(beta[1:] @ beta[1:])
    s0 = spec.noise_sd ** 2
    s1 = (spec.noise_sd * spec.hetero_factor) ** 2
    ey1 = (beta[0] + spec.tau) ** 2 + cov_var + s1
    ey0 = beta[0] ** 2 + cov_var + s0
    return ey1 / spec.pi1 + ey0 / (1.0 - spec.pi1) - spec.tau ** 2
