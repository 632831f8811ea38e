import logging
from dataclasses import dataclass
from typing import List, Optional

from .fit import fit
from .likelihood import log_likelihood
from .types import ModelError, normalize_regime

log = logging.getLogger(__name__)


class SelectionError(ModelError):
    """Raised when no candidate k could be fitted."""


@dataclass(frozen=True)
class SelectionRow:
    k: int
    validation_log_likelihood: Optional[float]
    status: str
    message: str = ""


def held_out_factors(model, covariances):
    """Activity/noise estimates for subjects the model was not fitted on."""
    from ..activity import estimate_batch

    return {est.subject_id: est.to_factors() for est in estimate_batch(model.loading, covariances)}


def validation_log_likelihood(model, covariances):
    return log_likelihood(model.loading, covariances, held_out_factors(model, covariances))


def select_k(regime, candidate_ks, train_cov, val_cov, hyper=None):
    """Pick k by held-out log-likelihood.

    Returns ``(k_best, table)`` where ``table`` lists a :class:`SelectionRow`
    per candidate in the order given. Candidates whose fit fails are kept in
    the table with status ``"failed"``.
    """
    regime = normalize_regime(regime)
    table: List[SelectionRow] = []
    for k in candidate_ks:
        k = int(k)
        try:
            model = fit(regime, k, train_cov, hyper)
            ll = validation_log_likelihood(model, val_cov)
        except ModelError as exc:
            log.warning("k=%d failed: %s", k, exc)
            table.append(SelectionRow(k, None, "failed", str(exc)))
            continue
        log.info("k=%d validation log-likelihood %.6g", k, ll)
        table.append(SelectionRow(k, ll, "ok"))
    ok = [row for row in table if row.status == "ok"]
    if not ok:
        raise SelectionError(f"every candidate k failed for regime {regime}")
    best = max(ok, key=lambda row: row.validation_log_likelihood)
    return best.k, table
