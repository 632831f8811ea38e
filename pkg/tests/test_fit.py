import numpy as np
import pytest
from scipy.linalg import subspace_angles

from brainage.models import (
    ConfigError,
    FittedModel,
    LoadingMatrix,
    OptimizerSettings,
    SelectionError,
    ValidationError,
    fit,
    fix_signs,
    initial_loading,
    log_likelihood,
    mcf_objective,
    project_nonnegative_orthonormal,
    select_k,
)
from brainage.models.select import validation_log_likelihood
from brainage.synth import SynthConfig, sample_cohort

from conftest import orthonormal_nonnegative

REGIMES = ["FA", "PCA", "NNPCA", "MCF", "MHA"]


@pytest.fixture(scope="module")
def small_cohort():
    return sample_cohort(SynthConfig(p=20, k=3, n_subjects=8, n_obs_per_subject=100, seed=1))


@pytest.fixture(scope="module")
def fitted(small_cohort):
    triples = small_cohort.subjects.covariance_triples()
    return {r: fit(r, 3, triples) for r in REGIMES}


def test_diagonal_example():
    K = np.diag([4.0, 1.0])
    model = fit("PCA", 1, [("a", K, 50)])
    np.testing.assert_allclose(model.W[:, 0], [1.0, 0.0], atol=1e-8)
    f = model.factors["a"]
    assert f.noise == pytest.approx(1.0, abs=1e-8)
    assert f.activities[0] == pytest.approx(4.0 - f.noise, abs=1e-8)


@pytest.mark.parametrize("regime", REGIMES)
def test_constraints_and_structure(fitted, regime):
    model = fitted[regime]
    assert isinstance(model, FittedModel)
    assert model.optimizer_state.converged
    W = model.W
    if regime in ("NNPCA", "MCF", "MHA"):
        assert np.all(W >= 0)
    if regime in ("PCA", "MCF", "MHA"):
        assert np.linalg.norm(W.T @ W - np.eye(3)) < 1e-4
    assert set(model.factors) == set(model.n_obs)
    for f in model.factors.values():
        assert f.activities.shape == (3,) and np.all(f.activities >= 0)
        assert np.all(np.atleast_1d(f.noise) > 0)
    assert np.ndim(model.factors["s0000"].noise) == (1 if regime == "FA" else 0)
    assert np.all(np.isfinite(model.optimizer_state.objective_trace))
    assert model.metadata["training_activity_source"] == "optimizer"


def test_mha_beats_pca_on_recovery(small_cohort, fitted):
    from brainage.synth import recovery_error

    truth = small_cohort.ground_truth_loading
    assert recovery_error(truth, fitted["MHA"].loading) < recovery_error(truth, fitted["PCA"].loading)


def test_pca_spans_pooled_eigenspace():
    rng = np.random.default_rng(5)
    p, k = 8, 2
    Q, _ = np.linalg.qr(rng.normal(size=(p, p)))
    triples = []
    for i in range(3):
        lam = np.concatenate([rng.uniform(3, 6, k), rng.uniform(0.5, 1.5, p - k)])
        triples.append((f"s{i}", Q @ np.diag(lam) @ Q.T, 100))
    pooled = sum(t[1] for t in triples) / 3
    top = np.linalg.eigh(pooled)[1][:, ::-1][:, :k]
    start, _ = np.linalg.qr(top + 0.3 * rng.normal(size=(p, k)))
    model = fit("PCA", k, triples, OptimizerSettings(tol=1e-12), init_loading=start)
    assert np.max(subspace_angles(model.W, top)) < 1e-3


@pytest.mark.parametrize("regime", ["PCA", "MHA"])
def test_local_optimality_probe(fitted, small_cohort, regime):
    model = fitted[regime]
    triples = small_cohort.subjects.covariance_triples()
    base = log_likelihood(model, triples)
    rng = np.random.default_rng(0)
    W = model.W
    for _ in range(10):
        D = rng.normal(size=W.shape) * 1e-3
        if regime == "PCA":
            # retract onto the orthonormal set
            Wp, _ = np.linalg.qr(W + D)
            Wp = fix_signs(Wp)
        else:
            Wp = project_nonnegative_orthonormal(np.where(W > 0, W + D, 0.0))
        assert log_likelihood(Wp, triples, model.factors) <= base + 1e-6 * abs(base)


def test_mcf_grid_oracle():
    rng = np.random.default_rng(2)
    triples = []
    for i in range(3):
        A = rng.normal(size=(2, 2))
        triples.append((f"s{i}", A @ A.T + 0.1 * np.eye(2), 50))
    model = fit("MCF", 1, triples, OptimizerSettings(tol=1e-12))
    theta = np.arange(0.0, np.pi / 2 + 1e-12, 1e-3)
    grid = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    values = [mcf_objective(w[:, None], triples) for w in grid]
    best = grid[int(np.argmax(values))]
    assert np.linalg.norm(model.W[:, 0] - best) < 1e-2


def test_k_must_be_below_p():
    with pytest.raises(ConfigError):
        fit("PCA", 3, [("a", np.eye(3), 10)])


def test_non_psd_rejected():
    with pytest.raises(ValidationError):
        fit("MHA", 1, [("a", np.diag([1.0, -1.0, 2.0]), 10)])


def test_unknown_regime():
    with pytest.raises(ConfigError):
        fit("ICA", 1, [("a", np.eye(3), 10)])


@pytest.mark.parametrize("regime", REGIMES)
def test_initial_loading_feasible(regime):
    rng = np.random.default_rng(4)
    A = rng.normal(size=(12, 12))
    W = initial_loading(A @ A.T, 3, regime)
    assert W.shape == (12, 3)
    if regime in ("NNPCA", "MCF", "MHA"):
        assert np.all(W >= 0)
    if regime in ("MCF", "MHA"):
        assert np.linalg.norm(W.T @ W - np.eye(3)) < 1e-12
        assert np.all((W > 0).sum(axis=1) <= 1)


def test_projection_keeps_feasible_points():
    rng = np.random.default_rng(6)
    W = orthonormal_nonnegative(rng, 15, 4)
    np.testing.assert_allclose(project_nonnegative_orthonormal(W), W, atol=1e-15)


def test_fit_is_deterministic(small_cohort):
    triples = small_cohort.subjects.covariance_triples()
    a = fit("MHA", 3, triples)
    b = fit("MHA", 3, triples)
    np.testing.assert_array_equal(a.W, b.W)


# model selection


@pytest.fixture(scope="module")
def selection_data():
    train = sample_cohort(SynthConfig(p=20, k=3, n_subjects=10, n_obs_per_subject=200, seed=3))
    val = sample_cohort(SynthConfig(p=20, k=3, n_subjects=6, n_obs_per_subject=200, seed=3), subject_offset=500)
    return train.subjects.covariance_triples(), val.subjects.covariance_triples()


def test_select_single_candidate(selection_data):
    train, val = selection_data
    k, table = select_k("MHA", [3], train, val)
    assert k == 3 and len(table) == 1 and table[0].status == "ok"


def test_validation_prefers_true_k(selection_data):
    train, val = selection_data
    ll_true = validation_log_likelihood(fit("MHA", 3, train), val)
    ll_low = validation_log_likelihood(fit("MHA", 1, train), val)
    assert ll_true > ll_low


def test_failed_candidates_marked(selection_data):
    train, val = selection_data
    k, table = select_k("MHA", [3, 25], train, val)
    assert k == 3
    assert [r.status for r in table] == ["ok", "failed"]
    with pytest.raises(SelectionError):
        select_k("MHA", [25, 30], train, val)


def test_loading_matrix_violation():
    W = np.array([[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]])
    assert LoadingMatrix(W, "mha").orthonormality_violation() == pytest.approx(3.0)
