"""Streaming analysis of randomized experiments without retaining records."""

from .bootstrap import (
    BootstrapMeanEnsemble,
    BootstrapRlsEnsemble,
    BootstrapSummary,
    OnlineRlsBootstrap,
    WeightGenerator,
    WeightMode,
    bootstrap_pate_step,
    bootstrap_rls_step,
    draw_weights,
    summarize,
    weighted_mean_update,
    weighted_rls_update,
)
from .estimators import PateStream, RegressionStream
from .robust import (
    ClusterContribution,
    DeltaMethodAccumulator,
    HrseAccumulator,
    SandwichAccumulator,
    delta_ratio_variance,
)
from .stream import (
    RecursiveMean,
    RlsState,
    iid_variance,
    mean_batch_update,
    mean_update,
    pate_point_estimate,
    pate_transform,
    rls_feed,
    rls_init,
    rls_update,
)
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

__version__ = "0.1.0"
