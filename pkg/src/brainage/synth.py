"""Synthetic cohorts with a known non-negative orthonormal loading, and the
recovery/prediction study built on them."""

import itertools
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import seeding
from .data import SubjectRecord, make_cohort
from .models.types import LoadingMatrix, ValidationError

log = logging.getLogger(__name__)

MAX_LOADING_ATTEMPTS = 100


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    p: int = 50
    k: int = 5
    n_subjects: int = 25
    n_obs_per_subject: int = 100
    activity_mean: float = 2.5
    activity_std: float = 1.0
    beta_range: Tuple[float, float] = (0.0, 10.0)
    subject_noise: float = 1.0
    age_noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "beta_range", tuple(float(b) for b in self.beta_range))
        if not 1 <= self.k < self.p:
            raise SynthConfigError(f"need 1 <= k < p (got k={self.k}, p={self.p})")
        if self.n_subjects < 1 or self.n_obs_per_subject < 2:
            raise SynthConfigError("need at least one subject and two observations per subject")
        for name in ("activity_std", "subject_noise", "age_noise"):
            if not getattr(self, name) > 0:
                raise SynthConfigError(f"{name} must be positive")
        lo, hi = self.beta_range
        if not hi >= lo:
            raise SynthConfigError("beta_range must be (low, high) with low <= high")


@dataclass(frozen=True)
class SynthCohort:
    ground_truth_loading: LoadingMatrix
    ground_truth_beta: np.ndarray
    subjects: object  # CohortDataset
    true_activities: Dict[str, np.ndarray] = field(default_factory=dict)
    true_noise: Dict[str, float] = field(default_factory=dict)
    config: Optional[SynthConfig] = None


def sample_loading(p, k, seed):
    """Non-negative loading with one nonzero per row and orthonormal columns.

    Dense U[0, 1] draws, keep each row's maximum (ties to the lowest column),
    then scale columns to unit norm. Redrawn if a column ends up empty.
    """
    if not 1 <= k < p:
        raise SynthConfigError(f"need 1 <= k < p (got k={k}, p={p})")
    rng = seeding.stream(seed, seeding.STAGE_LOADING)
    rows = np.arange(p)
    for _ in range(MAX_LOADING_ATTEMPTS):
        dense = rng.uniform(0.0, 1.0, size=(p, k))
        winner = np.argmax(dense, axis=1)  # first maximum wins ties
        W = np.zeros((p, k))
        W[rows, winner] = dense[rows, winner]
        norms = np.linalg.norm(W, axis=0)
        if np.all(norms > 0):
            return LoadingMatrix(W / norms, "MHA")
    raise SynthConfigError(f"could not draw a loading with no empty column in {MAX_LOADING_ATTEMPTS} attempts")


def _truncated_activities(rng, mean, std, k):
    g = rng.normal(mean, std, size=k)
    bad = g <= 0
    while bad.any():
        g[bad] = rng.normal(mean, std, size=int(bad.sum()))
        bad = g <= 0
    return g


def sample_cohort(config, subject_offset=0):
    """Draw loading, coefficients and per-subject time series and ages.

    Subject ``i`` draws from the stream keyed on ``subject_offset + i``, so a
    second call with a large offset yields fresh subjects from the same
    loading and coefficients.
    """
    W = sample_loading(config.p, config.k, config.seed).values
    lo, hi = config.beta_range
    beta = seeding.stream(config.seed, seeding.STAGE_BETA).uniform(lo, hi, size=config.k)
    v = float(config.subject_noise)
    age_sd = float(np.sqrt(config.age_noise))
    records, true_g, true_v = [], {}, {}
    width = max(4, len(str(subject_offset + config.n_subjects - 1)))
    for i in range(subject_offset, subject_offset + config.n_subjects):
        rng = seeding.stream(config.seed, seeding.STAGE_SUBJECT, i)
        g = _truncated_activities(rng, config.activity_mean, config.activity_std, config.k)
        n = config.n_obs_per_subject
        Z = rng.standard_normal((n, config.k)) * np.sqrt(g)
        E = rng.standard_normal((n, config.p)) * np.sqrt(v)
        X = Z @ W.T + E
        age = float(beta @ g + age_sd * rng.standard_normal())
        sid = f"s{i:0{width}d}"
        records.append(SubjectRecord(sid, X, age))
        true_g[sid] = g
        true_v[sid] = v
    cohort = make_cohort(records)
    return SynthCohort(LoadingMatrix(W, "MHA"), beta, cohort, true_g, true_v, config)


def _as_array(W):
    return W.values if isinstance(W, LoadingMatrix) else np.asarray(W, dtype=float)


def align_loading(W_true, W_hat):
    """Column permutation and signs of ``W_hat`` closest to ``W_true`` in squared error."""
    A, B = _as_array(W_true), _as_array(W_hat)
    if A.shape != B.shape:
        raise ValidationError(f"loading shapes differ: {A.shape} vs {B.shape}")
    # ||a - s b||^2 minimized over s in {+1,-1}: |a|^2 + |b|^2 - 2 |a.b|
    na = np.sum(A * A, axis=0)
    nb = np.sum(B * B, axis=0)
    dots = A.T @ B
    cost = na[:, None] + nb[None, :] - 2.0 * np.abs(dots)
    rows, cols = linear_sum_assignment(cost)
    signs = np.where(dots[rows, cols] < 0, -1.0, 1.0)
    aligned = np.empty_like(B)
    aligned[:, rows] = B[:, cols] * signs
    return aligned


def recovery_error(W_true, W_hat):
    """Squared Frobenius error after the optimal column permutation and sign flips."""
    A = _as_array(W_true)
    aligned = align_loading(A, W_hat)
    return float(np.sum((A - aligned) ** 2))


def recovery_error_bruteforce(W_true, W_hat):
    """Exhaustive search over all k! * 2^k alignments (small k only)."""
    A, B = _as_array(W_true), _as_array(W_hat)
    if A.shape != B.shape:
        raise ValidationError(f"loading shapes differ: {A.shape} vs {B.shape}")
    k = A.shape[1]
    best = np.inf
    for perm in itertools.permutations(range(k)):
        for signs in itertools.product((1.0, -1.0), repeat=k):
            err = np.sum((A - B[:, perm] * np.array(signs)) ** 2)
            best = min(best, err)
    return float(best)


# ---------------------------------------------------------------------------
# simulation study

AXES = {"vary_n": "n_obs_per_subject", "vary_N": "n_subjects"}
# the axis not being varied is pinned to these values
FIXED = {"vary_n": ("n_subjects", 25), "vary_N": ("n_obs_per_subject", 100)}
HELD_OUT_OFFSET = 1_000_000
RESULT_FIELDS = ["axis_value", "regime", "seed", "recovery_error", "mae", "status", "message"]


@dataclass(frozen=True)
class StudyRow:
    axis_value: int
    regime: str
    seed: int
    recovery_error: float
    mae: float
    status: str = "ok"
    message: str = ""


def repeat_seed(base_seed, repeat):
    return seeding.derive_seed(base_seed, seeding.STAGE_REPEAT, repeat)


def evaluate_regime(cohort, held_out, regime, hyper=None, use_intercept=True):
    """Fit one regime on a synthetic training cohort; return (recovery error, held-out MAE)."""
    from .agereg import activity_features, fit_age_model, predict_age
    from .data import compute_covariance
    from .models import fit

    train = cohort.subjects
    triples = [(s.subject_id, compute_covariance(s), s.n) for s in train.subjects]
    model = fit(regime, cohort.config.k, triples, hyper)
    features = model.activity_matrix(train.ids)
    ages = np.array([s.age for s in train.subjects])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        age_model = fit_age_model(features, ages, use_intercept=use_intercept)
    pred = predict_age(age_model, activity_features(model, held_out.subjects))
    true = np.array([s.age for s in held_out.subjects.subjects])
    err = recovery_error(cohort.ground_truth_loading, model.loading)
    return err, float(np.mean(np.abs(np.atleast_1d(pred) - true)))


def _study_cell(axis, value, regime, repeat, base, n_held_out, hyper):
    seed = repeat_seed(base.seed, repeat)
    fixed_name, fixed_value = FIXED[axis]
    config = replace(base, seed=seed, **{AXES[axis]: int(value), fixed_name: fixed_value})
    try:
        cohort = sample_cohort(config)
        held_out = sample_cohort(replace(config, n_subjects=n_held_out), subject_offset=HELD_OUT_OFFSET)
        err, mae = evaluate_regime(cohort, held_out, regime, hyper)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        log.warning("study cell %s=%s %s seed=%d failed: %s", axis, value, regime, seed, exc)
        return StudyRow(int(value), regime, seed, float("nan"), float("nan"), "failed", str(exc))
    return StudyRow(int(value), regime, seed, err, mae)


def run_study(axis, grid, regimes, repeats, base=None, n_held_out=100, hyper=None, n_jobs=1):
    """Recovery error and held-out MAE over a grid of n or N values.

    One row per (grid value, regime, repeat). Within a repeat every regime
    and grid value shares the same generating loading and coefficients. Rows
    come back sorted by (axis value, regime order, repeat) regardless of
    ``n_jobs``.
    """
    from .models.types import normalize_regime

    if axis not in AXES:
        raise SynthConfigError(f"axis must be one of {sorted(AXES)}")
    grid = [int(v) for v in grid]
    if not grid:
        raise SynthConfigError("grid must not be empty")
    if int(repeats) < 1:
        raise SynthConfigError("repeats must be >= 1")
    regimes = [normalize_regime(r) for r in regimes]
    base = base or SynthConfig()
    tasks = [(v, r, rep) for v in grid for r in regimes for rep in range(int(repeats))]
    if n_jobs == 1:
        rows = [_study_cell(axis, v, r, rep, base, n_held_out, hyper) for v, r, rep in tasks]
    else:
        from joblib import Parallel, delayed

        rows = Parallel(n_jobs=n_jobs)(
            delayed(_study_cell)(axis, v, r, rep, base, n_held_out, hyper) for v, r, rep in tasks
        )
    return rows


def summarize(rows):
    """Median and interquartile range per (axis value, regime) cell, failed rows excluded."""
    cells = {}
    for row in rows:
        cells.setdefault((row.axis_value, row.regime), []).append(row)
    out = []
    for (value, regime), group in cells.items():
        ok = [r for r in group if r.status == "ok"]
        entry = {"axis_value": value, "regime": regime, "n_ok": len(ok), "n_failed": len(group) - len(ok)}
        for metric in ("recovery_error", "mae"):
            vals = np.array([getattr(r, metric) for r in ok])
            if len(vals):
                q25, med, q75 = np.percentile(vals, [25, 50, 75])
            else:
                q25 = med = q75 = float("nan")
            entry[f"{metric}_median"] = float(med)
            entry[f"{metric}_q25"] = float(q25)
            entry[f"{metric}_q75"] = float(q75)
        out.append(entry)
    return out


SUMMARY_FIELDS = [
    "axis_value", "regime", "n_ok", "n_failed",
    "recovery_error_median", "recovery_error_q25", "recovery_error_q75",
    "mae_median", "mae_q25", "mae_q75",
]


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rows_to_csv(rows):
    lines = [",".join(RESULT_FIELDS)]
    for r in rows:
        rec = asdict(r)
        rec["message"] = '"' + rec["message"].replace('"', "'") + '"' if rec["message"] else ""
        lines.append(",".join(_fmt(rec[f]) for f in RESULT_FIELDS))
    return "\n".join(lines) + "\n"


def summary_to_csv(summary):
    lines = [",".join(SUMMARY_FIELDS)]
    for entry in summary:
        lines.append(",".join(_fmt(entry[f]) for f in SUMMARY_FIELDS))
    return "\n".join(lines) + "\n"
