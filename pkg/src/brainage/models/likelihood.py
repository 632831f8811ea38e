"""Log-likelihood of the shared-loading covariance model and its gradients."""

import numpy as np

from ._linalg import Capacitance, LOG_2PI, loglik_and_grads
from .types import FittedModel, LoadingMatrix, NumericError, ValidationError


def _as_W(W):
    if isinstance(W, LoadingMatrix):
        return W.values
    if isinstance(W, FittedModel):
        return W.loading.values
    return np.asarray(W, dtype=float)


def stack_inputs(W, covariances, factors):
    """Pack ``(subject_id, K, n)`` triples and factors into batched arrays."""
    W = _as_W(W)
    p, k = W.shape
    ids, Ks, ns, gs, ds = [], [], [], [], []
    for sid, K, n in covariances:
        if sid not in factors:
            raise ValidationError(f"no factors supplied for subject {sid!r}")
        K = np.asarray(K, dtype=float)
        if K.shape != (p, p):
            raise ValidationError(f"covariance of {sid!r} has shape {K.shape}, expected ({p}, {p})")
        f = factors[sid]
        g = np.asarray(f.activities, dtype=float)
        if g.shape != (k,):
            raise ValidationError(f"activities of {sid!r} have shape {g.shape}, expected ({k},)")
        if np.any(g < 0):
            raise ValidationError(f"negative activity for subject {sid!r}")
        d = f.noise_vector(p)
        if np.any(d <= 0):
            raise ValidationError(f"non-positive noise for subject {sid!r}")
        ids.append(sid)
        Ks.append(K)
        ns.append(float(n))
        gs.append(g)
        ds.append(d)
    return W, ids, np.array(Ks), np.array(ns), np.array(gs), np.array(ds)


def _check_finite(values, ids):
    bad = ~np.isfinite(values)
    if np.any(bad):
        sid = ids[int(np.argmax(bad))]
        raise NumericError(f"non-finite log-likelihood for subject {sid!r}")


def log_likelihood(model, covariances, factors=None, per_subject=False):
    """Gaussian log-likelihood summed over subjects; higher is better.

    ``model`` may be a :class:`FittedModel`, a :class:`LoadingMatrix` or a raw
    p x k array. When ``factors`` is omitted the model's own training factors
    are used.
    """
    if factors is None:
        if not isinstance(model, FittedModel):
            raise ValidationError("factors are required unless a FittedModel is given")
        factors = model.factors
    W, ids, K, n, g, d = stack_inputs(model, covariances, factors)
    cap = Capacitance(W, g, d)
    p = W.shape[0]
    ll = -0.5 * n * (p * LOG_2PI + cap.logdet() + cap.trace_inv_times(K))
    _check_finite(ll, ids)
    if per_subject:
        return dict(zip(ids, ll.tolist()))
    return float(np.sum(ll))


def grad_loading(W, covariances, factors):
    """Gradient of :func:`log_likelihood` with respect to the loading matrix.

    Sum over subjects of ``n_i (-S_i^-1 + S_i^-1 K_i S_i^-1) W G_i`` with the
    inverses applied through the Woodbury identity.
    """
    W, ids, K, n, g, d = stack_inputs(W, covariances, factors)
    ll, dW, _, ll_i = loglik_and_grads(W, g, d, K, n, need_activity=False)
    _check_finite(ll_i, ids)
    return dW


def grad_activities(W, K, factors, n=1):
    """Gradient of one subject's log-likelihood in the diagonal of G.

    ``(n / 2) diag(W^T (-S^-1 + S^-1 K S^-1) W)``; ``factors`` is that
    subject's :class:`SubjectFactors`.
    """
    W, ids, Ks, ns, g, d = stack_inputs(W, [("_", K, n)], {"_": factors})
    _, _, dg, ll_i = loglik_and_grads(W, g, d, Ks, ns)
    _check_finite(ll_i, ids)
    return dg[0]


def projected_activity_step(activities, gradient, step):
    """One projected ascent step keeping activities non-negative."""
    return np.maximum(np.asarray(activities) + step * np.asarray(gradient), 0.0)


def mcf_objective(W, covariances, factors=None):
    """Sum over subjects and columns of the squared quadratic forms W_j^T K_i W_j.

    ``factors`` is accepted for signature symmetry with the likelihood and is
    not used: the objective depends on the loading only.
    """
    W = _as_W(W)
    Ks = _stack_covariances(W, covariances)
    q = np.einsum("pj,ipj->ij", W, Ks @ W)
    return float(np.sum(q ** 2))


def mcf_gradient(W, covariances, factors=None):
    """Column j: 4 sum_i (W_j^T K_i W_j) K_i W_j."""
    W = _as_W(W)
    Ks = _stack_covariances(W, covariances)
    KW = Ks @ W
    q = np.einsum("pj,ipj->ij", W, KW)
    return 4.0 * np.einsum("ij,ipj->pj", q, KW)


def _stack_covariances(W, covariances):
    p = W.shape[0]
    Ks = []
    for item in covariances:
        K = np.asarray(item[1] if isinstance(item, tuple) else item, dtype=float)
        if K.shape != (p, p):
            raise ValidationError(f"covariance has shape {K.shape}, expected ({p}, {p})")
        Ks.append(K)
    return np.array(Ks)
