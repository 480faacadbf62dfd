"""Non-homogeneous hidden Markov models for longitudinal Gaussian panels
with potentially informative monotone dropout.

The model couples a hidden-chain mixture for the responses with a
latent-class logistic model for the missingness indicators through an
upper-level class variable; a single upper-level class makes the two
processes independent (ignorable missingness).
"""

from .chain import (
    ChainLaw,
    build_chain_law,
    chain_law_logits,
    cumulative_logits,
    invert_global_logit,
)
from .data import (
    PanelData,
    SubjectRecord,
    ValidationReport,
    read_panel_csv,
    validate_panel,
    write_panel_csv,
)
from .em import (
    FitResult,
    Posteriors,
    e_step,
    fit,
    initial_parameters,
    m_step_chain,
    m_step_dropout,
    m_step_longitudinal,
    m_step_mixture,
)
from .errors import (
    BoundaryError,
    ComponentDeathError,
    DegenerateFitError,
    InputError,
    ModelError,
    NumericalError,
    SpecMismatchError,
    UnboundedLogitError,
    ValidationError,
)
from .inference import (
    CovarianceReport,
    from_unconstrained,
    sandwich_covariance,
    subject_score,
    subject_scores,
    to_unconstrained,
    total_score,
)
from .likelihood import (
    LatticeSlice,
    backward_pass,
    brute_force_loglik,
    dropout_class_logliks,
    dropout_logdensity,
    emission_logdensity,
    forward_pass,
    observed_loglik,
    subject_logliks,
)
from .params import (
    EMControls,
    ModelSpec,
    ParameterSet,
    canonicalize,
    count_free_parameters,
)
from .selection import (
    GridCell,
    GridReport,
    SensitivityReport,
    aic,
    bic,
    fit_grid,
    select,
    sensitivity_compare,
)
from .simulate import (
    CovariateDesign,
    SimTruth,
    complete_data_loglik,
    default_truth,
    simulate_panel,
)

__version__ = "0.1.0"

__all__ = [
    "BoundaryError", "ChainLaw", "ComponentDeathError", "CovarianceReport",
    "CovariateDesign", "DegenerateFitError", "EMControls", "FitResult",
    "GridCell", "GridReport", "InputError", "LatticeSlice", "ModelError",
    "ModelSpec", "NumericalError", "PanelData", "ParameterSet", "Posteriors",
    "SensitivityReport", "SimTruth", "SpecMismatchError", "SubjectRecord",
    "UnboundedLogitError", "ValidationError", "ValidationReport", "aic",
    "backward_pass", "bic", "brute_force_loglik", "build_chain_law",
    "canonicalize", "chain_law_logits", "complete_data_loglik",
    "count_free_parameters", "cumulative_logits", "default_truth",
    "dropout_class_logliks", "dropout_logdensity", "e_step",
    "emission_logdensity", "fit", "fit_grid", "forward_pass",
    "from_unconstrained", "initial_parameters", "invert_global_logit",
    "m_step_chain", "m_step_dropout", "m_step_longitudinal", "m_step_mixture",
    "observed_loglik", "read_panel_csv", "sandwich_covariance", "select",
    "sensitivity_compare", "simulate_panel", "subject_logliks",
    "subject_score", "subject_scores", "to_unconstrained", "total_score",
    "validate_panel", "write_panel_csv",
]
