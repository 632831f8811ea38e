"""Linear brain-age regression on network activities and its bootstrap evaluation."""

import csv
import os
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import seeding
from .activity import estimate_subject
from .data import DimensionMismatchError, compute_covariance


class AgeRegressionError(ValueError):
    pass


class RankDeficiencyWarning(UserWarning):
    pass


@dataclass(frozen=True)
class AgeModel:
    coefficients: np.ndarray
    intercept: float = 0.0
    use_intercept: bool = True
    rank: Optional[int] = None
    warnings: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "coefficients", np.asarray(self.coefficients, dtype=float))
        if not np.all(np.isfinite(self.coefficients)) or not np.isfinite(self.intercept):
            raise AgeRegressionError("age model coefficients must be finite")

    @property
    def k(self):
        return len(self.coefficients)


@dataclass(frozen=True)
class EvalReport:
    mae_mean: float
    mae_std: float
    n_bootstrap: int
    subset_size: int
    seed: int

    def to_dict(self):
        return asdict(self)


def _design(features, use_intercept):
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if use_intercept:
        X = np.column_stack([np.ones(X.shape[0]), X])
    return X


def fit_age_model(features, ages, use_intercept=True):
    """Least-squares fit of age on activities through an SVD solve.

    A rank-deficient design (for instance a network that is silent in every
    subject, or fewer subjects than coefficients) gets the minimum-norm
    solution and a :class:`RankDeficiencyWarning`, which is also recorded on
    the returned model.
    """
    ages = np.asarray(ages, dtype=float)
    X = _design(features, use_intercept)
    if X.shape[0] != ages.shape[0]:
        raise AgeRegressionError(f"{X.shape[0]} feature rows but {ages.shape[0]} ages")
    if not np.all(np.isfinite(ages)):
        raise AgeRegressionError("ages must be present and finite for every training subject")
    coef, _, rank, _ = np.linalg.lstsq(X, ages, rcond=None)
    notes = ()
    if rank < X.shape[1]:
        msg = f"design matrix has rank {rank} < {X.shape[1]} columns; minimum-norm solution returned"
        warnings.warn(msg, RankDeficiencyWarning, stacklevel=2)
        notes = (msg,)
    if use_intercept:
        return AgeModel(coef[1:], float(coef[0]), True, int(rank), notes)
    return AgeModel(coef, 0.0, False, int(rank), notes)


def predict_age(model, activities):
    """Intercept plus coefficients dotted with activities; one row per subject for 2-D input."""
    g = np.asarray(activities, dtype=float)
    if g.shape[-1] != model.k:
        raise AgeRegressionError(f"expected {model.k} activities, got {g.shape[-1]}")
    out = g @ model.coefficients + model.intercept
    return float(out) if np.ndim(out) == 0 else out


def bootstrap_mae(predictions, true_ages, subset_size=30, n_bootstrap=1000, seed=0):
    """Mean and spread of the MAE over random subject subsets.

    Each replicate draws ``subset_size`` subjects without replacement from a
    generator keyed on (seed, replicate index).
    """
    pred = np.asarray(predictions, dtype=float)
    true = np.asarray(true_ages, dtype=float)
    if pred.shape != true.shape or pred.ndim != 1:
        raise AgeRegressionError("predictions and ages must be 1-D and of equal length")
    M = len(pred)
    if subset_size < 1 or M < subset_size:
        raise AgeRegressionError(f"need at least subset_size={subset_size} subjects, got {M}")
    if n_bootstrap < 1:
        raise AgeRegressionError("n_bootstrap must be >= 1")
    err = np.abs(pred - true)
    maes = np.empty(n_bootstrap)
    for b in range(n_bootstrap):
        rng = seeding.stream(seed, seeding.STAGE_BOOTSTRAP, b)
        idx = rng.choice(M, size=subset_size, replace=False)
        maes[b] = err[idx].mean()
    return EvalReport(float(maes.mean()), float(maes.std()), int(n_bootstrap), int(subset_size), int(seed))


def activity_features(model, cohort):
    """Clamped activity estimates for every subject in ``cohort`` (cohort order)."""
    if cohort.p != model.p:
        raise DimensionMismatchError(f"cohort has p={cohort.p} but the model was fitted with p={model.p}")
    rows = []
    for s in cohort.subjects:
        K = s.covariance if s.covariance is not None else compute_covariance(s)
        rows.append(estimate_subject(model.loading, K, s.subject_id).clamped_activities)
    return np.vstack(rows)


def transfer_evaluate(model, age_model, unseen_cohort, subset_size=30, n_bootstrap=1000, seed=0):
    """Apply a frozen loading and regression to a new cohort and bootstrap the MAE."""
    missing = [s.subject_id for s in unseen_cohort.subjects if s.age is None]
    if missing:
        raise AgeRegressionError(f"subjects without age in the unseen cohort: {', '.join(missing)}")
    features = activity_features(model, unseen_cohort)
    predictions = predict_age(age_model, features)
    ages = np.array([s.age for s in unseen_cohort.subjects])
    return bootstrap_mae(np.atleast_1d(predictions), ages, subset_size, n_bootstrap, seed)


# ---------------------------------------------------------------------------
# persistence

AGE_MODEL_SCHEMA = 1


def age_model_to_dict(model):
    return {
        "schema_version": AGE_MODEL_SCHEMA,
        "kind": "age_model",
        "coefficients": [float(c) for c in model.coefficients],
        "intercept": float(model.intercept),
        "use_intercept": bool(model.use_intercept),
        "rank": model.rank,
        "warnings": list(model.warnings),
    }


def age_model_from_dict(doc):
    from .serialize import SchemaError

    if doc.get("kind") != "age_model" or doc.get("schema_version") != AGE_MODEL_SCHEMA:
        raise SchemaError(
            f"unsupported age model document (kind={doc.get('kind')!r}, schema_version={doc.get('schema_version')!r})"
        )
    return AgeModel(
        np.array(doc["coefficients"], dtype=float),
        float(doc["intercept"]),
        bool(doc["use_intercept"]),
        doc.get("rank"),
        tuple(doc.get("warnings", ())),
    )


LEDGER_FIELDS = ["run_id", "regime", "k", "dataset", "mae_mean", "mae_std", "seed"]


def append_ledger(path, run_id, regime, k, dataset, report):
    """Append one result row, writing the header on first use."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(LEDGER_FIELDS)
        writer.writerow([run_id, regime, k, dataset, repr(report.mae_mean), repr(report.mae_std), report.seed])
