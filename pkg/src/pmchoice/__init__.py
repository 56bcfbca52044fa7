"""Robust semiparametric estimation of panel multinomial choice models.

Two-stage estimator: nonparametric regression of intertemporal
choice-probability differences on two-period covariates, followed by
minimization of a monotonicity-contraposition criterion over the unit
sphere via adaptive grid search in spherical coordinates.  A
simulation lab reproduces the estimator's Monte Carlo evidence at
desk scale.
"""

from .data import (
    PanelDataset,
    PeriodPair,
    ParseError,
    ValidationError,
    load_csv,
    outcome_diff,
    save_csv,
    select_pairs,
    stack_pair,
)
from .sphere import (
    AngleRectangle,
    angles_to_unit,
    enclosing_rectangle,
    geodesic,
    unit_to_angles,
)
from .criterion import (
    CriterionEvaluator,
    Smoother,
    criterion_value,
    sign_restriction,
    sign_restriction_subset,
    smooth,
    subset_criterion_value,
)
from .firststage import (
    KernelRegressor,
    ProbDiffEstimates,
    RegressorSpec,
    ShallowNetwork,
    cross_validate,
    default_cv_grid,
    fit_prob_diffs,
    load_estimates,
    save_estimates,
)
from .optimizer import (
    EstimationResult,
    GridConfig,
    estimate_set,
    minimize_criterion,
    trace_to_text,
)
from .simlab import (
    DgpConfig,
    EstimatorSettings,
    LogitOracle,
    McReport,
    OlsResult,
    RankDeficientError,
    SimTruth,
    TrueProbDiffs,
    estimate_dataset,
    first_stage_mse,
    ols_baseline,
    run_first_stage_mc,
    run_monte_carlo,
    simulate,
)

__version__ = "0.1.0"
