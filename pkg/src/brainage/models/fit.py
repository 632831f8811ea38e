"""Block-coordinate ascent for the five loading regimes.

Each outer iteration takes one projected-gradient step on the loading
(augmented-Lagrangian terms for the orthonormal regimes, projection onto the
non-negative orthant for the non-negative ones), refreshes every subject's
activities, refreshes the noise, and periodically updates the multipliers.
The optimizer works on the log-likelihood divided by the total number of
observations so that step sizes and the penalty weight are scale-free.
"""

import logging

import numpy as np

from ._linalg import Capacitance, LOG_2PI, loglik_and_grads
from .types import (
    NONNEGATIVE_REGIMES,
    ORTHONORMAL_REGIMES,
    ConfigError,
    DivergenceError,
    FittedModel,
    LoadingMatrix,
    OptimizerSettings,
    OptimizerState,
    SubjectFactors,
    ValidationError,
    normalize_regime,
)

log = logging.getLogger(__name__)

ARMIJO = 1e-4


def _unpack(training_covariances, k):
    ids, Ks, ns = [], [], []
    seen = set()
    for sid, K, n in training_covariances:
        sid = str(sid)
        if sid in seen:
            raise ValidationError(f"duplicate subject id {sid!r}")
        seen.add(sid)
        K = np.asarray(K, dtype=float)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValidationError(f"covariance of {sid!r} is not square")
        scale = max(np.max(np.abs(K)), 1e-300)
        if np.max(np.abs(K - K.T)) > 1e-10 * scale:
            raise ValidationError(f"covariance of {sid!r} is not symmetric")
        ev = np.linalg.eigvalsh(K)
        if ev[0] < -1e-10 * max(ev[-1], 0.0) - 1e-300:
            raise ValidationError(f"covariance of {sid!r} is not positive semi-definite")
        if not n >= 1:
            raise ValidationError(f"subject {sid!r} needs a positive observation count")
        ids.append(sid)
        Ks.append(0.5 * (K + K.T))
        ns.append(float(n))
    if not ids:
        raise ValidationError("no training covariances supplied")
    Ks = np.array(Ks)
    if len({K.shape for K in Ks}) != 1:
        raise ValidationError("covariances have different dimensions")
    p = Ks.shape[1]
    if not 1 <= k < p:
        raise ConfigError(f"k must satisfy 1 <= k < p (got k={k}, p={p})")
    return ids, Ks, np.array(ns)


def fix_signs(W):
    """Flip columns so that each column's largest-magnitude entry is positive."""
    W = np.array(W, dtype=float)
    idx = np.argmax(np.abs(W), axis=0)
    signs = np.sign(W[idx, np.arange(W.shape[1])])
    signs[signs == 0] = 1.0
    return W * signs


def project_nonnegative_orthonormal(W):
    """Nearest-structure feasible point: keep each row's largest entry, unit columns.

    Columns left without any support fall back to the normalized
    non-negative part of the input column.
    """
    W = np.maximum(np.asarray(W, dtype=float), 0.0)
    p, k = W.shape
    out = np.zeros_like(W)
    rows = np.arange(p)
    winner = np.argmax(W, axis=1)
    out[rows, winner] = W[rows, winner]
    norms = np.linalg.norm(out, axis=0)
    if np.any(norms == 0):
        return _normalize_columns(W)
    return out / norms


def _normalize_columns(W):
    norms = np.linalg.norm(W, axis=0)
    norms[norms == 0] = 1.0
    return W / norms


def initial_loading(pooled, k, regime):
    """Top-k eigenvectors of the pooled covariance, made feasible for ``regime``."""
    _, vecs = np.linalg.eigh(pooled)
    top = vecs[:, ::-1][:, :k]
    if regime in ("FA", "PCA"):
        return fix_signs(top)
    W = _normalize_columns(np.abs(top))
    if regime in ORTHONORMAL_REGIMES:
        return project_nonnegative_orthonormal(W)
    return W


class _Problem:
    """Mutable optimizer state for one fit."""

    def __init__(self, regime, Ks, ns, hyper):
        self.regime = regime
        self.Ks = Ks
        self.ns = ns
        self.hyper = hyper
        self.N, self.p, _ = Ks.shape
        self.n_total = float(np.sum(ns))
        self.orthonormal = regime in ORTHONORMAL_REGIMES
        self.nonnegative = regime in NONNEGATIVE_REGIMES
        self.trK = np.trace(Ks, axis1=1, axis2=2)
        self.diagK = np.diagonal(Ks, axis1=1, axis2=2)
        # MCF scale: with every quadratic form bounded by the largest
        # eigenvalue, the scaled objective stays below k |w|^4 and the
        # quartic orthonormality penalty keeps the problem bounded
        lam = float(np.max(np.linalg.eigvalsh(Ks)[:, -1]))
        self.mcf_scale = self.N * max(lam, 1e-12) ** 2

    # data term -----------------------------------------------------------

    def data_value(self, W, g, d):
        if self.regime == "MCF":
            q = self.quad_forms(W)
            return float(np.sum(q ** 2)) / self.mcf_scale
        cap = Capacitance(W, g, d)
        ll = -0.5 * self.ns * (self.p * LOG_2PI + cap.logdet() + cap.trace_inv_times(self.Ks))
        return float(np.sum(ll)) / self.n_total

    def data_value_and_grad(self, W, g, d):
        if self.regime == "MCF":
            KW = self.Ks @ W
            q = np.einsum("pj,ipj->ij", W, KW)
            val = float(np.sum(q ** 2)) / self.mcf_scale
            grad = 4.0 * np.einsum("ij,ipj->pj", q, KW) / self.mcf_scale
            return val, grad
        ll, dW, _, _ = loglik_and_grads(W, g, d, self.Ks, self.ns, need_activity=False)
        return ll / self.n_total, dW / self.n_total

    # augmented objective -------------------------------------------------

    def penalty(self, W, gamma, delta):
        if not self.orthonormal:
            return 0.0
        C = W.T @ W - np.eye(W.shape[1])
        return float(np.sum(gamma * C) + 0.5 * delta * np.sum(C * C))

    def penalty_grad(self, W, gamma, delta):
        C = W.T @ W - np.eye(W.shape[1])
        return W @ (gamma + gamma.T) + 2.0 * delta * W @ C

    def augmented(self, W, g, d, gamma, delta):
        return self.data_value(W, g, d) - self.penalty(W, gamma, delta)

    def augmented_and_grad(self, W, g, d, gamma, delta):
        val, grad = self.data_value_and_grad(W, g, d)
        if self.orthonormal:
            val -= self.penalty(W, gamma, delta)
            grad = grad - self.penalty_grad(W, gamma, delta)
        return val, grad

    def project(self, W):
        return np.maximum(W, 0.0) if self.nonnegative else W

    # block updates -------------------------------------------------------

    def quad_forms(self, W):
        return np.einsum("pj,ipj->ij", W, self.Ks @ W)

    def closed_form_noise(self, W):
        k = W.shape[1]
        resid = self.trK - np.sum(self.quad_forms(W), axis=1)
        return np.maximum(resid / (self.p - k), self.hyper.floor)

    def closed_form_activities(self, W, v):
        return np.maximum(self.quad_forms(W) - v[:, None], self.hyper.floor)

    def fa_noise(self, W, g):
        # diag(K - W G W^T)
        model_diag = np.einsum("pj,ij,pj->ip", W, g, W)
        return np.maximum(self.diagK - model_diag, self.hyper.floor)

    def gradient_activities(self, W, g, d, steps):
        """Projected gradient ascent on each subject's activities, per-subject backtracking."""
        floor = self.hyper.floor
        eta = np.full(self.N, 1.0)
        for _ in range(steps):
            _, _, dg, ll_i = loglik_and_grads(W, g, d, self.Ks, self.ns)
            dg = dg / self.ns[:, None]
            ll_i = ll_i / self.ns
            eta = np.minimum(eta * 2.0, 1e6)
            pending = np.ones(self.N, dtype=bool)
            g_new = g.copy()
            for _ in range(self.hyper.max_halvings):
                cand = np.maximum(g + eta[:, None] * dg, floor)
                cap = Capacitance(W, cand, d)
                ll_c = -0.5 * (self.p * LOG_2PI + cap.logdet() + cap.trace_inv_times(self.Ks))
                gain = np.sum(dg * (cand - g), axis=1)
                ok = np.isfinite(ll_c) & (ll_c >= ll_i + ARMIJO * gain)
                accept = pending & ok
                g_new[accept] = cand[accept]
                pending &= ~ok
                if not pending.any():
                    break
                eta[pending] *= 0.5
            g = g_new
        return g


def fit(regime, k, training_covariances, hyper=None, init_loading=None):
    """Fit the shared loading and per-subject factors.

    ``training_covariances`` is a sequence of ``(subject_id, K, n)``.
    Returns a :class:`FittedModel`; raises :class:`DivergenceError` if the
    objective becomes non-finite.
    """
    regime = normalize_regime(regime)
    hyper = hyper or OptimizerSettings()
    k = int(k)
    ids, Ks, ns = _unpack(training_covariances, k)
    prob = _Problem(regime, Ks, ns, hyper)
    p = prob.p

    pooled = np.einsum("i,ipq->pq", ns / prob.n_total, Ks)
    if init_loading is None:
        W = initial_loading(pooled, k, regime)
    else:
        W = prob.project(np.array(init_loading, dtype=float))
        if W.shape != (p, k):
            raise ConfigError(f"initial loading has shape {W.shape}, expected ({p}, {k})")

    v = prob.closed_form_noise(W)
    g = prob.closed_form_activities(W, v)
    d = prob.fa_noise(W, g) if regime == "FA" else np.repeat(v[:, None], p, axis=1)

    gamma = np.zeros((k, k))
    delta = float(hyper.penalty_weight)
    eta = float(hyper.step_size)
    state = OptimizerState(gamma, delta, eta)
    trace = state.objective_trace

    prev = None
    for it in range(1, hyper.max_iter + 1):
        F, grad = prob.augmented_and_grad(W, g, d, gamma, delta)
        if not np.isfinite(F) or not np.all(np.isfinite(grad)):
            raise DivergenceError(
                f"objective became non-finite at iteration {it} (step size {eta:.3g})",
                iteration=it,
                step_size=eta,
            )
        trace.append(F)

        violation = np.linalg.norm(W.T @ W - np.eye(k)) if prob.orthonormal else 0.0
        if prev is not None:
            rel = abs(F - prev) / max(abs(prev), 1.0)
            if rel < hyper.tol and violation < hyper.constraint_tol:
                state.converged = True
                break
        prev = F

        # (a) loading step with backtracking on the augmented objective
        trial = min(2.0 * eta, hyper.max_step_size) if it > 1 else eta
        accepted = False
        for _ in range(hyper.max_halvings + 1):
            W_new = prob.project(W + trial * grad)
            F_new = prob.augmented(W_new, g, d, gamma, delta)
            if np.isfinite(F_new) and F_new >= F + ARMIJO * np.sum(grad * (W_new - W)):
                accepted = True
                break
            trial *= 0.5
        if accepted:
            W = W_new
            eta = trial

        if not prob.orthonormal:
            # unit columns; the scale moves into the activities
            norms = np.linalg.norm(W, axis=0)
            norms[norms == 0] = 1.0
            W = W / norms
            g = g * norms ** 2

        # (b) activities, (c) noise
        if regime == "FA":
            g = prob.gradient_activities(W, g, d, hyper.activity_steps)
            d = prob.fa_noise(W, g)
        elif regime == "NNPCA":
            g = prob.gradient_activities(W, g, d, hyper.activity_steps)
            d = np.repeat(prob.closed_form_noise(W)[:, None], p, axis=1)
        else:
            g = prob.closed_form_activities(W, d[:, 0])
            d = np.repeat(prob.closed_form_noise(W)[:, None], p, axis=1)

        # (d) multipliers
        if prob.orthonormal and it % hyper.multiplier_interval == 0:
            gamma = gamma + delta * (W.T @ W - np.eye(k))

    state.lagrange_multipliers = gamma
    state.step_size = eta
    state.iteration = len(trace)
    state.constraint_violation = float(np.linalg.norm(W.T @ W - np.eye(k)))
    if not state.converged:
        log.warning("%s fit stopped at max_iter=%d without meeting tolerances", regime, hyper.max_iter)

    if regime in ("FA", "PCA"):
        W = fix_signs(W)
    factors = {}
    for i, sid in enumerate(ids):
        noise = d[i].copy() if regime == "FA" else float(d[i, 0])
        factors[sid] = SubjectFactors(g[i].copy(), noise)
    final_ll = None
    if regime != "MCF":
        final_ll = prob.data_value(W, g, d) * prob.n_total
    metadata = {
        "training_activity_source": "optimizer",
        "unseen_activity_source": "trace-projection estimate",
        "final_objective": trace[-1] if trace else None,
        "final_log_likelihood": final_ll,
    }
    return FittedModel(
        LoadingMatrix(W, regime),
        factors,
        k,
        state,
        {sid: int(n) for sid, n in zip(ids, ns)},
        metadata,
    )
