"""Empirical-Bayes experimental design from archives of past studies.

The package estimates a prior over treatment effects from published
study summaries (Gaussian maximum likelihood or nonparametric NPMLE),
turns it into posteriors, and optimizes experimental designs against
estimation-risk, in-experiment-welfare, and policy-choice objectives,
with a verification lab for regret bounds and information orderings.
"""

from .archive import (
    Diagnostic,
    StrataConfig,
    StudyArchive,
    StudySummary,
    load_archive,
    load_strata_config,
    save_archive,
    validate_archive,
)
from .designs import (
    COMPLIANCE_MODES,
    Design,
    DesignProblem,
    EstimationQuadratic,
    InExperimentWelfare,
    PolicyChoice,
    check_feasibility,
    design_cost,
    gamma_policy,
    grid_search_design,
    no_information_design,
    objective1_risk,
    sampling_variance,
    solve_objective1,
    solve_objective2,
    solve_objective3,
)
from .errors import IdentificationError, NumericalError, ValidationError
from .posteriors import (
    PosteriorSummary,
    gaussian_posterior,
    mixture_posterior,
    posterior_mean_sd,
    scalar_index_posterior_variance,
)
from .priors import (
    DEFAULT_OPTIONS,
    DiscretePrior,
    FitReport,
    GaussianPrior,
    OptimizerOptions,
    build_grid,
    fit_gaussian_prior,
    fit_npmle,
    fit_npmle_independent,
    gls_mean,
    load_prior,
    marginal_loglik,
    moment_match,
    prior_from_dict,
    prior_to_dict,
    profile_loglik,
    save_prior,
)
from .regret import (
    BinaryAdoption,
    ContinuationKind,
    DesignLattice,
    DominanceEntry,
    DominanceReport,
    Portfolio,
    QuadraticForm,
    RateConfig,
    RateResult,
    ReductionEntry,
    ReductionReport,
    RegretResult,
    RegretTemplate,
    Selection,
    Testing,
    TwoStratumOracle,
    ValueEstimate,
    closed_form_value_quadratic,
    continuation_value,
    eb_beats_ni,
    lipschitz_certificate,
    loewner_dominance,
    mc_value,
    propensity_lattice,
    rate_experiment,
    regret_experiment,
    scalar_index_reduction_check,
    synthesize_archive,
    two_stratum_oracle,
    two_stratum_risk,
)

__version__ = "1.0.0"

__all__ = [
    "COMPLIANCE_MODES",
    "DEFAULT_OPTIONS",
    "BinaryAdoption",
    "ContinuationKind",
    "Design",
    "DesignLattice",
    "DesignProblem",
    "Diagnostic",
    "DiscretePrior",
    "DominanceEntry",
    "DominanceReport",
    "EstimationQuadratic",
    "FitReport",
    "GaussianPrior",
    "IdentificationError",
    "InExperimentWelfare",
    "NumericalError",
    "OptimizerOptions",
    "PolicyChoice",
    "Portfolio",
    "PosteriorSummary",
    "QuadraticForm",
    "RateConfig",
    "RateResult",
    "ReductionEntry",
    "ReductionReport",
    "RegretResult",
    "RegretTemplate",
    "Selection",
    "StrataConfig",
    "StudyArchive",
    "StudySummary",
    "Testing",
    "TwoStratumOracle",
    "ValidationError",
    "ValueEstimate",
    "build_grid",
    "check_feasibility",
    "closed_form_value_quadratic",
    "continuation_value",
    "design_cost",
    "eb_beats_ni",
    "fit_gaussian_prior",
    "fit_npmle",
    "fit_npmle_independent",
    "gamma_policy",
    "gaussian_posterior",
    "gls_mean",
    "grid_search_design",
    "lipschitz_certificate",
    "load_archive",
    "load_prior",
    "load_strata_config",
    "loewner_dominance",
    "marginal_loglik",
    "mc_value",
    "mixture_posterior",
    "moment_match",
    "no_information_design",
    "objective1_risk",
    "posterior_mean_sd",
    "prior_from_dict",
    "prior_to_dict",
    "profile_loglik",
    "propensity_lattice",
    "rate_experiment",
    "regret_experiment",
    "sampling_variance",
    "save_archive",
    "save_prior",
    "scalar_index_posterior_variance",
    "scalar_index_reduction_check",
    "solve_objective1",
    "solve_objective2",
    "solve_objective3",
    "synthesize_archive",
    "two_stratum_oracle",
    "two_stratum_risk",
    "validate_archive",
]
