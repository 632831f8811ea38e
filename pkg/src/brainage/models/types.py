from dataclasses import dataclass, field
from typing import Dict, List, Optional, Union

import numpy as np

REGIMES = ("FA", "PCA", "NNPCA", "MCF", "MHA")
ORTHONORMAL_REGIMES = frozenset({"PCA", "MCF", "MHA"})
NONNEGATIVE_REGIMES = frozenset({"NNPCA", "MCF", "MHA"})


class ModelError(Exception):
    """Base class for fitting and evaluation failures."""


class ConfigError(ModelError, ValueError):
    pass


class ValidationError(ModelError, ValueError):
    pass


class DivergenceError(ModelError, ArithmeticError):
    def __init__(self, message, iteration=None, step_size=None):
        super().__init__(message)
        self.iteration = iteration
        self.step_size = step_size


class NumericError(ModelError, ArithmeticError):
    pass


def normalize_regime(regime):
    name = str(regime).upper()
    if name not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}; expected one of {', '.join(REGIMES)}")
    return name


@dataclass(frozen=True)
class LoadingMatrix:
    values: np.ndarray
    regime: str

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        object.__setattr__(self, "regime", normalize_regime(self.regime))
        if self.values.ndim != 2:
            raise ValidationError("loading matrix must be 2-D")

    @property
    def p(self):
        return self.values.shape[0]

    @property
    def k(self):
        return self.values.shape[1]

    def orthonormality_violation(self):
        W = self.values
        return float(np.linalg.norm(W.T @ W - np.eye(W.shape[1])))


@dataclass(frozen=True)
class SubjectFactors:
    """Network activities and observation noise for one subject.

    ``noise`` is a scalar variance for every regime except FA, where it is a
    length-p vector of per-region variances.
    """

    activities: np.ndarray
    noise: Union[float, np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "activities", np.asarray(self.activities, dtype=float))
        if np.ndim(self.noise) == 0:
            object.__setattr__(self, "noise", float(self.noise))
        else:
            object.__setattr__(self, "noise", np.asarray(self.noise, dtype=float))

    def noise_vector(self, p):
        if np.ndim(self.noise) == 0:
            return np.full(p, self.noise)
        if self.noise.shape != (p,):
            raise ValidationError(f"noise vector has shape {self.noise.shape}, expected ({p},)")
        return self.noise


@dataclass
class OptimizerState:
    lagrange_multipliers: np.ndarray
    penalty_weight: float
    step_size: float
    iteration: int = 0
    objective_trace: List[float] = field(default_factory=list)
    converged: bool = False
    constraint_violation: float = 0.0


@dataclass(frozen=True)
class OptimizerSettings:
    """Hyper-parameters for the block-coordinate ascent.

    ``step_size`` is the first trial step of the backtracking search; later
    iterations start from twice the last accepted step, capped at
    ``max_step_size``.
    """

    step_size: float = 1e-2
    max_step_size: float = 1e3
    max_halvings: int = 30
    penalty_weight: float = 10.0
    multiplier_interval: int = 10
    max_iter: int = 5000
    tol: float = 1e-6
    constraint_tol: float = 1e-4
    activity_steps: int = 5
    floor: float = 1e-8

    def __post_init__(self):
        for name in ("step_size", "max_step_size", "penalty_weight", "tol", "constraint_tol", "floor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("max_halvings", "multiplier_interval", "max_iter", "activity_steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass(frozen=True)
class FittedModel:
    loading: LoadingMatrix
    factors: Dict[str, SubjectFactors]
    k: int
    optimizer_state: OptimizerState
    n_obs: Dict[str, int]
    metadata: Dict[str, object] = field(default_factory=dict)

    @property
    def regime(self):
        return self.loading.regime

    @property
    def p(self):
        return self.loading.p

    @property
    def W(self):
        return self.loading.values

    def activity_matrix(self, subject_ids: Optional[List[str]] = None):
        ids = list(self.factors) if subject_ids is None else subject_ids
        return np.vstack([self.factors[s].activities for s in ids])
