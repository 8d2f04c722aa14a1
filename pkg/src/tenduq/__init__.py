"""tenduq: uncertainty-aware calibration and identifiability for strain-field monitoring."""

from .core import (
    Normalizer,
    ObservationSet,
    ParameterEntry,
    ParameterSpace,
    PriorSpec,
    latin_hypercube,
    prior_log_density,
    sample_prior,
)
from .forward import (
    SnapshotTable,
    SyntheticBeamModel,
    UpscaledBeamModel,
    eval_f,
    eval_g,
    generate_observations,
    load_snapshots,
)
from .pce import PceExpansion, QuadratureRule, StochasticInput, build_pce, gauss_hermite, pce_moments
from .surrogate import GpEnsemble, GpModel, KernelSpec, gp_fit, gp_predict, gp_validate
from .calibrate import (
    LikelihoodSpec,
    PosteriorEnsemble,
    cluster_and_prune,
    log_likelihood_embedded,
    log_likelihood_plain,
    posterior_summary,
    predictive_check,
    run_ensemble_mcmc,
)
from .influence import (
    InfluenceReport,
    influence_fixed_mean,
    influence_global,
    influence_kde_marginal,
    influence_report,
    log_ratio_weights,
)
from .separability import (
    MomentSurrogates,
    SeparabilityMap,
    ci_95,
    maximin_over_grid,
    min_detectable_delta,
    overlap_integral,
    separability_map,
    train_moment_surrogates,
)

__version__ = "0.1.0"
