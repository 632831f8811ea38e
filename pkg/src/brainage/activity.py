"""Network activity and noise estimates for subjects outside the training set."""

import csv
from dataclasses import dataclass

import numpy as np

from .models.types import (
    ORTHONORMAL_REGIMES,
    ConfigError,
    FittedModel,
    LoadingMatrix,
    SubjectFactors,
    ValidationError,
)

DEFAULT_MAX_VIOLATION = 1e-3
NOISE_FLOOR = 1e-8


@dataclass(frozen=True)
class ActivityEstimate:
    subject_id: str
    activities: np.ndarray
    clamped_activities: np.ndarray
    noise: float

    def to_factors(self):
        """Factors usable by the likelihood (noise floored away from zero)."""
        return SubjectFactors(self.clamped_activities, max(self.noise, NOISE_FLOOR))


def _loading(W):
    if isinstance(W, FittedModel):
        return W.loading
    if isinstance(W, LoadingMatrix):
        return W
    return LoadingMatrix(np.asarray(W, dtype=float), "PCA")


def _default_threshold(loading):
    # the trace-projection estimates are still applied to non-orthonormal regimes,
    # where the orthonormality check is meaningless.
    return DEFAULT_MAX_VIOLATION if loading.regime in ORTHONORMAL_REGIMES else None


def _check(loading, Sigma_hat, max_violation):
    S = np.asarray(Sigma_hat, dtype=float)
    p, k = loading.values.shape
    if S.shape != (p, p):
        raise ValidationError(f"covariance has shape {S.shape}, expected ({p}, {p})")
    if p == k:
        raise ConfigError("noise estimate undefined when k equals p")
    if max_violation is not None:
        viol = loading.orthonormality_violation()
        if viol >= max_violation:
            raise ValidationError(
                f"loading orthonormality violation {viol:.3g} exceeds {max_violation:.3g}"
            )
    return S


def estimate_noise(W, Sigma_hat, max_violation="auto"):
    """Residual variance outside the span of W: (tr S - tr W^T S W) / (p - k), floored at 0."""
    loading = _loading(W)
    if max_violation == "auto":
        max_violation = _default_threshold(loading)
    S = _check(loading, Sigma_hat, max_violation)
    Wv = loading.values
    p, k = Wv.shape
    resid = np.trace(S) - np.trace(Wv.T @ S @ Wv)
    return max(float(resid) / (p - k), 0.0)


def estimate_activities(W, Sigma_hat, noise, subject_id="", k=None, max_violation="auto"):
    """Per-network activity W_j^T S W_j - noise, with a clamped copy."""
    loading = _loading(W)
    if k is not None and k != loading.k:
        raise ValidationError(f"loading has {loading.k} columns, caller expects {k}")
    if max_violation == "auto":
        max_violation = _default_threshold(loading)
    S = _check(loading, Sigma_hat, max_violation)
    Wv = loading.values
    raw = np.einsum("pj,pq,qj->j", Wv, S, Wv) - noise
    return ActivityEstimate(str(subject_id), raw, np.maximum(raw, 0.0), float(noise))


def estimate_subject(W, Sigma_hat, subject_id="", max_violation="auto"):
    noise = estimate_noise(W, Sigma_hat, max_violation=max_violation)
    return estimate_activities(W, Sigma_hat, noise, subject_id=subject_id, max_violation=max_violation)


def estimate_batch(W, covariances, max_violation="auto"):
    """Estimates for ``(subject_id, K[, n])`` items, in input order."""
    return [estimate_subject(W, item[1], item[0], max_violation=max_violation) for item in covariances]


def write_activity_csv(estimates, path):
    estimates = list(estimates)
    k = len(estimates[0].activities) if estimates else 0
    header = ["subject_id"] + [f"g_{j + 1}" for j in range(k)] + ["noise"]
    header += [f"g_{j + 1}_raw" for j in range(k)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for est in estimates:
            writer.writerow(
                [est.subject_id]
                + [repr(float(x)) for x in est.clamped_activities]
                + [repr(float(est.noise))]
                + [repr(float(x)) for x in est.activities]
            )
