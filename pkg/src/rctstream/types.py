"""Core data types shared by the streaming estimators."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class StreamError(ValueError):
    """Base class for invalid input or state in a stream computation."""


class NotIdentifiableError(StreamError):
    """Raised when the buffered design cannot identify the coefficients yet.

    Buffer more records (or raise the initialization cap) and retry.
    """


class DegenerateUpdateError(StreamError):
    """Raised when a rank-one update has a vanishing denominator."""


class EmptyStreamError(StreamError):
    """Raised when an estimate is requested before any data arrived."""


class DfDivisor(str, enum.Enum):
    N_MINUS_K = "nk"
    N_MINUS_K_MINUS_1 = "nk1"


@dataclass(eq=False)
class Record:
    """One experiment observation.

    ``x`` is the full feature vector: ``x[0]`` is the intercept (1), ``x[1]``
    the treatment indicator, the rest covariates. The array is copied on
    construction so the caller's buffer is never aliased.
    """

    y: float
    x: np.ndarray
    cluster_id: Optional[bytes] = None

    def __post_init__(self) -> None:
        x = np.array(self.x, dtype=np.float64)
        if x.ndim != 1 or x.shape[0] < 2:
            raise StreamError("x must be a 1-D vector with intercept and treatment entries")
        if not np.all(np.isfinite(x)) or not math.isfinite(self.y):
            raise StreamError("record contains non-finite values")
        if x[0] != 1.0:
            raise StreamError("x[0] must be the intercept 1")
        if x[1] != 0.0 and x[1] != 1.0:
            raise StreamError(f"treatment indicator must be 0 or 1, got {x[1]!r}")
        if self.cluster_id is not None and isinstance(self.cluster_id, str):
            self.cluster_id = self.cluster_id.encode("utf-8")
        self.x = x
        self.y = float(self.y)

    @classmethod
    def from_values(
        cls,
        y: float,
        d: int,
        covariates: Sequence[float] = (),
        cluster_id: bytes | str | None = None,
    ) -> "Record":
        return cls(y, np.concatenate(([1.0, float(d)], np.asarray(covariates, float))), cluster_id)

    @property
    def d(self) -> int:
        return int(self.x[1])

    @property
    def k(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class StreamConfig:
    """Settings shared by a single analysis stream.

    ``init_m`` is the number of raw records buffered for the batch start of
    recursive least squares. ``init_m == 0`` starts from running sufficient
    statistics instead, so no raw record is ever buffered. ``init_cap``
    bounds how far the buffer may grow past ``init_m`` when the first
    ``init_m`` records are collinear (default ``10 * init_m``).
    """

    k: int = 2
    pi1: float = 0.5
    init_m: int = 0
    df_divisor: DfDivisor = DfDivisor.N_MINUS_K
    init_cap: Optional[int] = None

    def __post_init__(self) -> None:
        if self.k < 2:
            raise StreamError("k counts intercept and treatment, so k >= 2")
        if not 0.0 < self.pi1 < 1.0:
            raise StreamError("pi1 must lie strictly between 0 and 1")
        if self.init_m < 0:
            raise StreamError("init_m must be non-negative")
        if 0 < self.init_m < self.k:
            raise StreamError(f"init_m must be 0 or at least k={self.k}")
        if self.init_cap is not None and self.init_cap < self.init_m:
            raise StreamError("init_cap must be >= init_m")
        object.__setattr__(self, "df_divisor", DfDivisor(self.df_divisor))

    @property
    def buffer_cap(self) -> int:
        if self.init_cap is not None:
            return self.init_cap
        return 10 * self.init_m


@dataclass
class EffectEstimate:
    tau_hat: float
    n: int
    method: str
    se: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    flags: tuple = ()

    def to_dict(self) -> dict:
        ci = None if self.ci_low is None else [self.ci_low, self.ci_high]
        return {
            "method": self.method,
            "n": self.n,
            "tau_hat": self.tau_hat,
            "se": self.se,
            "ci": ci,
            "flags": list(self.flags),
        }


@dataclass
class VarianceReport:
    """Estimated covariance of the coefficient vector.

    ``j_count`` records the number of clusters that contributed, when the
    estimator is cluster-based.
    """

    sigma: np.ndarray
    method: str
    dof: Optional[int] = None
    sigma2_hat: Optional[float] = None
    j_count: Optional[int] = None
    notes: tuple = field(default_factory=tuple)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sigma), 0.0, None))
