from .types import (
    NONNEGATIVE_REGIMES,
    ORTHONORMAL_REGIMES,
    REGIMES,
    ConfigError,
    DivergenceError,
    FittedModel,
    LoadingMatrix,
    ModelError,
    NumericError,
    OptimizerSettings,
    OptimizerState,
    SubjectFactors,
    ValidationError,
    normalize_regime,
)
from .likelihood import (
    grad_activities,
    grad_loading,
    log_likelihood,
    mcf_gradient,
    mcf_objective,
    projected_activity_step,
)
from .fit import fit, fix_signs, initial_loading, project_nonnegative_orthonormal
from .select import SelectionError, SelectionRow, select_k, held_out_factors, validation_log_likelihood
