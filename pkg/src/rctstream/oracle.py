"""Full-retention batch reference computations, for verification only.

Nothing in the streaming path imports this module. It keeps every record in
memory on purpose and exists to check the recursive estimators against
textbook batch formulas.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import scipy.linalg

from .types import Record, StreamError


@dataclass
class RetainedDataset:
    X: np.ndarray
    y: np.ndarray
    cluster_ids: Optional[list] = None

    @classmethod
    def from_records(cls, records: Iterable[Record]) -> "RetainedDataset":
        rows = list(records)
        if not rows:
            raise StreamError("empty dataset")
        X = np.vstack([r.x for r in rows])
        y = np.array([r.y for r in rows])
        ids = [r.cluster_id for r in rows]
        return cls(X, y, None if all(c is None for c in ids) else ids)

    @property
    def d(self) -> np.ndarray:
        return self.X[:, 1]

    def cluster_codes(self) -> np.ndarray:
        if self.cluster_ids is None:
            raise StreamError("dataset has no cluster ids")
        _, codes = np.unique(np.array(self.cluster_ids, dtype=object).astype(bytes), return_inverse=True)
        return codes


@dataclass
class OlsFit:
    beta: np.ndarray
    xtx_inv: np.ndarray
    ssr: float
    residuals: np.ndarray


def batch_ols(data: RetainedDataset) -> OlsFit:
    """Normal equations solved through an LU factorization with partial pivoting.

    Residuals follow the ``x'beta - y`` sign convention.
    """
    X, y = data.X, data.y
    xtx = X.T @ X
    with warnings.catch_warnings():
        # singularity is reported below as a StreamError
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(xtx)
    if np.min(np.abs(np.diag(lu))) <= 1e-12 * np.max(np.abs(np.diag(lu))):
        raise StreamError("singular design")
    beta = scipy.linalg.lu_solve((lu, piv), X.T @ y)
    xtx_inv = scipy.linalg.lu_solve((lu, piv), np.eye(X.shape[1]))
    resid = X @ beta - y
    return OlsFit(beta, 0.5 * (xtx_inv + xtx_inv.T), float(resid @ resid), resid)


def batch_iid_cov(data: RetainedDataset, dof_offset: int = 0) -> np.ndarray:
    fit = batch_ols(data)
    n, k = data.X.shape
    return fit.xtx_inv * fit.ssr / (n - k - dof_offset)


def batch_hc0(data: RetainedDataset, beta: Optional[np.ndarray] = None) -> np.ndarray:
    fit = batch_ols(data)
    b = fit.beta if beta is None else beta
    e = data.X @ b - data.y
    meat = (data.X * (e ** 2)[:, None]).T @ data.X
    return fit.xtx_inv @ meat @ fit.xtx_inv


def batch_cluster_meat(data: RetainedDataset, beta: np.ndarray) -> np.ndarray:
    """Block-diagonal meat built cluster by cluster from retained rows."""
    codes = data.cluster_codes()
    e = data.X @ beta - data.y
    k = data.X.shape[1]
    meat = np.zeros((k, k))
    for j in np.unique(codes):
        rows = codes == j
        Xj, ej = data.X[rows], e[rows]
        meat += Xj.T @ np.outer(ej, ej) @ Xj
    return meat


def batch_cluster_sandwich(data: RetainedDataset, beta: Optional[np.ndarray] = None) -> np.ndarray:
    fit = batch_ols(data)
    b = fit.beta if beta is None else beta
    if len(np.unique(data.cluster_codes())) < 2:
        raise StreamError("need at least 2 clusters")
    meat = batch_cluster_meat(data, b)
    return fit.xtx_inv @ meat @ fit.xtx_inv


def pate_values(data: RetainedDataset, pi1: float) -> np.ndarray:
    d = data.d
    return d * data.y / pi1 - (1 - d) * data.y / (1 - pi1)


def diff_in_means(data: RetainedDataset) -> float:
    d = data.d
    return float(data.y[d == 1].mean() - data.y[d == 0].mean())


def batch_multinomial_bootstrap(
    data: RetainedDataset,
    B: int,
    seed: int,
    statistic: str = "pate",
    pi1: float = 0.5,
    cluster: bool = False,
) -> np.ndarray:
    """Resample-with-replacement bootstrap replicates.

    ``statistic="pate"`` gives the mean of the inverse-probability contrast,
    ``"ols"`` the full coefficient vector. With ``cluster=True`` whole
    clusters are resampled.
    """
    if B < 2:
        raise StreamError("B must be at least 2")
    gen = np.random.default_rng(seed)
    n = data.y.shape[0]
    z = pate_values(data, pi1) if statistic == "pate" else None
    if cluster:
        codes = data.cluster_codes()
        n_clusters = codes.max() + 1
        members = [np.flatnonzero(codes == j) for j in range(n_clusters)]
    out = []
    for _ in range(B):
        if cluster:
            picks = gen.integers(0, n_clusters, n_clusters)
            idx = np.concatenate([members[j] for j in picks])
        else:
            idx = gen.integers(0, n, n)
        if statistic == "pate":
            out.append(z[idx].mean())
        elif statistic == "ols":
            Xb, yb = data.X[idx], data.y[idx]
            out.append(np.linalg.lstsq(Xb, yb, rcond=None)[0])
        else:
            raise StreamError(f"unknown statistic {statistic!r}")
    return np.array(out)
