"""Sample size determination for small-area survey estimates."""

from ._core import (
    AdjacencyGraph,
    CovariateMatrix,
    FittedPosterior,
    LossKind,
    MetricsTable,
    ModelSpec,
    Population,
    Sample,
    SsdConfig,
    SsdTrace,
    direct_rse,
    direct_variance,
    draw_design_sample,
    ess_to_actual,
    fit_laplace,
    fit_mcmc,
    fraction_to_ess,
    halving_steps,
    k_max,
    load_adjacency,
    load_covariates,
    load_population,
    loss,
    rse,
    run_scenario,
    run_ssd,
    run_ssd_stub,
    synth_population,
)

__all__ = [name for name in dir() if not name.startswith("_")]
