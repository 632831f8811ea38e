import numpy as np
import pytest

from brainage.models import SubjectFactors

_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(criterion, passed, detail):
        status = "PASS" if passed else "FAIL"
        _ACCEPTANCE_LINES.append(f"[{status}] {criterion}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_instance(rng, p, k, N, fa=False, n_obs=50):
    """Random loading, factors and sample covariances for gradient checks."""
    W = rng.normal(size=(p, k))
    covs, factors = [], {}
    for i in range(N):
        sid = f"s{i}"
        X = rng.normal(size=(n_obs, p)) * rng.uniform(0.5, 2.0, size=p)
        K = X.T @ X / n_obs
        g = rng.uniform(0.3, 3.0, size=k)
        noise = rng.uniform(0.3, 2.0, size=p) if fa else float(rng.uniform(0.3, 2.0))
        covs.append((sid, K, int(rng.integers(20, 200))))
        factors[sid] = SubjectFactors(g, noise)
    return W, covs, factors


def central_difference(f, x, h=1e-6):
    x = np.array(x, dtype=float)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        out[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def dense_log_likelihood(W, covs, factors):
    """Direct evaluation with p x p inverses and determinants (oracle)."""
    total = 0.0
    p = W.shape[0]
    for sid, K, n in covs:
        f = factors[sid]
        S = W @ np.diag(f.activities) @ W.T + np.diag(f.noise_vector(p))
        _, logdet = np.linalg.slogdet(S)
        total += -0.5 * n * (p * np.log(2 * np.pi) + logdet + np.trace(np.linalg.solve(S, K)))
    return total


def orthonormal_nonnegative(rng, p, k):
    """Exactly feasible MHA loading: one nonzero per row, unit columns."""
    owner = rng.permutation(np.concatenate([np.arange(k), rng.integers(0, k, size=p - k)]))
    W = np.zeros((p, k))
    W[np.arange(p), owner] = rng.uniform(0.2, 1.0, size=p)
    return W / np.linalg.norm(W, axis=0)
