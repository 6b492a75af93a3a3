"""Anchor-based inversion of Gaussian random fields from indirect data."""

from .anchors import (
    AnchorSet,
    Block,
    LinearData,
    SplitCandidate,
    anchor_prior_moments,
    apply_anchors,
    enumerate_split_candidates,
    initial_anchorset,
    sample_field_given_anchors,
    umbrella_anchorset,
)
from .engine import (
    EngineSettings,
    InversionState,
    IterationRecord,
    Problem,
    importance_weights,
    init_state,
    mad_ratio,
    pca_reduce,
    posterior_field_ensemble,
    run_iteration,
    sample_size_schedule,
)
from .gaussian import GaussianMoments, condition_gaussian, conditional_simulate, sample_gaussian
from .geostat import GeostatParams, GeostatPrior, build_covariance, matern15_correlation
from .grids import FieldRealization, Grid
from .mixtures import (
    KdeTuning,
    NormalMixture,
    WeightedSample,
    kde_fit,
    mixture_condition,
    mixture_linear_map,
)

__version__ = "0.1.0"
