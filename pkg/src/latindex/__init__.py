"""Survey-weighted latent index pipeline.

Fits a weighted binary latent trait model, rescales the per-unit scores
to a [0, 1] index, predicts per-domain medians of the index by Monte
Carlo best prediction under a nested-error model, and fits quantile
regressions with a group random intercept on top of the index.
"""

from .errors import (
    DegenerateItemError,
    DegenerateScaleError,
    NumericalError,
    SchemaError,
    ValidationError,
)
from .quadrature import HermiteRule, gaussian_expectation, hermite_rule
from .latent_trait import (
    FittedLTM,
    ItemParameters,
    LatentScores,
    ResponseMatrix,
    eap_scores,
    em_fit,
    item_probability,
    scale_scores,
    simulate_responses,
    weighted_marginal_loglik,
)
from .sae_ebp import (
    EBPResult,
    NestedErrorFit,
    PopulationFrame,
    SampleData,
    conditional_effect,
    ebp_indicator,
    fit_nested_error,
    shrinkage_gamma,
    simulate_census,
)
from .quantile_mixed import (
    BootstrapFits,
    GroupedData,
    QuantileMixedFit,
    QuantilePrediction,
    ald_logdensity,
    bootstrap_fits,
    check_loss,
    fit_lqmm,
    lqmm_loglik,
    predict_conditional,
    predict_marginal,
)

__version__ = "0.1.0"

__all__ = [
    "DegenerateItemError",
    "DegenerateScaleError",
    "NumericalError",
    "SchemaError",
    "ValidationError",
    "HermiteRule",
    "gaussian_expectation",
    "hermite_rule",
    "FittedLTM",
    "ItemParameters",
    "LatentScores",
    "ResponseMatrix",
    "eap_scores",
    "em_fit",
    "item_probability",
    "scale_scores",
    "simulate_responses",
    "weighted_marginal_loglik",
    "EBPResult",
    "NestedErrorFit",
    "PopulationFrame",
    "SampleData",
    "conditional_effect",
    "ebp_indicator",
    "fit_nested_error",
    "shrinkage_gamma",
    "simulate_census",
    "BootstrapFits",
    "GroupedData",
    "QuantileMixedFit",
    "QuantilePrediction",
    "ald_logdensity",
    "bootstrap_fits",
    "check_loss",
    "fit_lqmm",
    "lqmm_loglik",
    "predict_conditional",
    "predict_marginal",
    "__version__",
]
