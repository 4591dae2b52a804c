"""Two-component semi-supervised Cox mixture for responder / non-responder analysis."""

__version__ = "0.1.0"

from .cox import (
    CoxOptions,
    WeightedCoxFit,
    breslow_baseline,
    fit_weighted_cox,
    partial_lik_gradient_hessian,
    weighted_partial_loglik,
)
from .em import (
    DualCoxModel,
    FitOptions,
    FitReport,
    check_convergence,
    classify,
    component_log_density,
    e_step,
    fit,
    initialize,
    m_step_beta_and_baseline,
    m_step_pi,
    observed_loglik,
)
from .survival import (
    StepFunction,
    SurvivalSample,
    TrialDataset,
    kaplan_meier,
    logrank_test,
    read_csv,
    validate_dataset,
)
