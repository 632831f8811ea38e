"""Batched low-rank-plus-diagonal covariance algebra.

Every per-subject covariance has the form

    Sigma_i = W diag(g_i) W^T + diag(d_i)

with a shared ``W`` (p x k). Inverses and log-determinants are obtained from
the k x k capacitance matrix ``I + B^T D^-1 B`` with ``B = W diag(sqrt(g))``,
so no p x p inverse is ever formed and zero activities stay well-posed.
Arrays carry a leading subject axis: ``K`` is (N, p, p), ``g`` is (N, k) and
``d`` is (N, p).
"""

import numpy as np

LOG_2PI = np.log(2.0 * np.pi)


class Capacitance:
    """Cached Woodbury pieces for a batch of subjects."""

    def __init__(self, W, g, d):
        self.W = W
        self.g = g
        self.d = d
        self.dinv = 1.0 / d
        sg = np.sqrt(g)
        # B_i = W diag(sqrt g_i), C_i = D_i^-1 B_i
        self.B = W[None, :, :] * sg[:, None, :]
        self.C = self.dinv[:, :, None] * self.B
        k = W.shape[1]
        M = np.eye(k)[None] + np.swapaxes(self.B, 1, 2) @ self.C
        self.chol = np.linalg.cholesky(M)
        # eigenvalues of M are >= 1, so the explicit k x k inverse is benign
        self.Minv = np.linalg.inv(M)

    def _solve_m(self, X):
        return self.Minv @ X

    def apply_inverse(self, X):
        """Sigma_i^-1 X_i for a batch of (p, m) blocks."""
        CtX = np.swapaxes(self.C, 1, 2) @ X
        return self.dinv[:, :, None] * X - self.C @ self._solve_m(CtX)

    def logdet(self):
        diag = np.diagonal(self.chol, axis1=1, axis2=2)
        return np.sum(np.log(self.d), axis=1) + 2.0 * np.sum(np.log(diag), axis=1)

    def trace_inv_times(self, K):
        """tr(Sigma_i^-1 K_i) for each subject."""
        diagK = np.diagonal(K, axis1=1, axis2=2)
        first = np.sum(self.dinv * diagK, axis=1)
        KC = K @ self.C
        CtKC = np.swapaxes(self.C, 1, 2) @ KC
        second = np.trace(self._solve_m(CtKC), axis1=1, axis2=2)
        return first - second

    def dense_inverse(self):
        p = self.W.shape[0]
        eye = np.broadcast_to(np.eye(p), (self.d.shape[0], p, p))
        return self.apply_inverse(np.array(eye))


def per_subject_loglik(W, g, d, K, n):
    """-(n_i / 2) [p log 2pi + log det Sigma_i + tr(Sigma_i^-1 K_i)]."""
    cap = Capacitance(W, g, d)
    p = W.shape[0]
    return -0.5 * n * (p * LOG_2PI + cap.logdet() + cap.trace_inv_times(K))


def loglik_and_grads(W, g, d, K, n, need_activity=True):
    """Total log-likelihood with its gradients in W and in each g_i.

    Returns ``(ll, dW, dg)`` where ``dW`` is (p, k) and ``dg`` is (N, k) or
    None when ``need_activity`` is false.
    """
    cap = Capacitance(W, g, d)
    p = W.shape[0]
    ll_i = -0.5 * n * (p * LOG_2PI + cap.logdet() + cap.trace_inv_times(K))
    Wb = np.broadcast_to(W, (g.shape[0],) + W.shape)
    A = cap.apply_inverse(Wb)              # Sigma^-1 W
    KA = K @ A
    SKA = cap.apply_inverse(KA)            # Sigma^-1 K Sigma^-1 W
    inner = SKA - A                        # (-Sigma^-1 + Sigma^-1 K Sigma^-1) W
    dW = np.einsum("i,ipk,ik->pk", n, inner, g)
    dg = None
    if need_activity:
        quad = np.einsum("pk,ipk->ik", W, inner)
        dg = 0.5 * n[:, None] * quad
    return float(np.sum(ll_i)), dW, dg, ll_i
