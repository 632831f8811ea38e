import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brainage import serialize
from brainage.agereg import (
    AgeModel,
    AgeRegressionError,
    RankDeficiencyWarning,
    age_model_from_dict,
    age_model_to_dict,
    append_ledger,
    bootstrap_mae,
    fit_age_model,
    predict_age,
    transfer_evaluate,
)
from brainage.data import DimensionMismatchError, SubjectRecord, make_cohort
from brainage.models import fit
from brainage.synth import SynthConfig, sample_cohort


def test_exact_line_no_intercept():
    m = fit_age_model([[1.0], [2.0], [3.0]], [2.0, 4.0, 6.0], use_intercept=False)
    assert m.coefficients[0] == pytest.approx(2.0, abs=1e-12)
    assert m.intercept == 0.0 and m.k == 1


def test_noiseless_refit():
    rng = np.random.default_rng(0)
    G = rng.uniform(0, 5, size=(100, 5))
    beta = rng.uniform(0, 10, size=5)
    m = fit_age_model(G, G @ beta + 30.0)
    np.testing.assert_allclose(m.coefficients, beta, atol=1e-8)
    assert m.intercept == pytest.approx(30.0, abs=1e-8)


def test_constant_feature_warns():
    rng = np.random.default_rng(1)
    G = np.column_stack([rng.normal(size=20), np.zeros(20)])
    with pytest.warns(RankDeficiencyWarning):
        m = fit_age_model(G, rng.normal(size=20) + 50)
    assert m.warnings and np.all(np.isfinite(predict_age(m, G)))


def test_too_few_subjects_gives_min_norm():
    with pytest.warns(RankDeficiencyWarning):
        m = fit_age_model(np.eye(3), [1.0, 2.0, 3.0])
    assert np.all(np.isfinite(m.coefficients))


def test_missing_age_rejected():
    with pytest.raises(AgeRegressionError):
        fit_age_model(np.eye(3), [1.0, np.nan, 2.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.booleans())
def test_residuals_orthogonal_to_design(seed, intercept):
    rng = np.random.default_rng(seed)
    G = rng.uniform(0, 5, size=(40, 4))
    a = rng.normal(50, 10, size=40)
    m = fit_age_model(G, a, use_intercept=intercept)
    r = a - predict_age(m, G)
    X = np.column_stack([np.ones(40), G]) if intercept else G
    assert np.max(np.abs(X.T @ r)) < 1e-8 * max(1.0, np.abs(X).sum() * np.abs(a).max())


def test_predict_examples():
    assert predict_age(AgeModel(np.zeros(3), 54.31), np.zeros(3)) == 54.31
    assert predict_age(AgeModel([1.0, 1.0], 0.0, False), [2.0, 3.0]) == 5.0
    with pytest.raises(AgeRegressionError):
        predict_age(AgeModel([1.0, 1.0]), [1.0, 2.0, 3.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.permutations(range(4)))
def test_joint_permutation_invariance(seed, perm):
    rng = np.random.default_rng(seed)
    G = rng.uniform(0, 5, size=(10, 4))
    beta = rng.normal(size=4)
    perm = list(perm)
    a = predict_age(AgeModel(beta, 3.0), G)
    b = predict_age(AgeModel(beta[perm], 3.0), G[:, perm])
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_refit_after_permutation():
    rng = np.random.default_rng(2)
    G = rng.uniform(0, 5, size=(30, 3))
    a = G @ [1.0, 2.0, 3.0] + rng.normal(size=30)
    perm = [2, 0, 1]
    m1, m2 = fit_age_model(G, a), fit_age_model(G[:, perm], a)
    np.testing.assert_allclose(predict_age(m1, G), predict_age(m2, G[:, perm]), atol=1e-10)


def test_bootstrap_perfect_and_constant():
    true = np.linspace(20, 80, 50)
    r = bootstrap_mae(true, true, 30, 200, seed=1)
    assert (r.mae_mean, r.mae_std) == (0.0, 0.0)
    signs = np.where(np.arange(50) % 2, 1.0, -1.0)
    r = bootstrap_mae(true + 3.0 * signs, true, 30, 200, seed=1)
    assert r.mae_mean == pytest.approx(3.0, abs=1e-12) and r.mae_std == pytest.approx(0.0, abs=1e-12)


def test_bootstrap_full_subset_equals_full_mae():
    rng = np.random.default_rng(3)
    pred, true = rng.normal(size=40), rng.normal(size=40)
    r = bootstrap_mae(pred, true, subset_size=40, n_bootstrap=50, seed=0)
    full = np.mean(np.abs(pred - true))
    assert r.mae_mean == pytest.approx(full, rel=1e-12) and r.mae_std < 1e-12


def test_bootstrap_mean_converges():
    rng = np.random.default_rng(4)
    pred, true = rng.normal(size=200), rng.normal(size=200)
    err = np.abs(pred - true)
    r = bootstrap_mae(pred, true, subset_size=30, n_bootstrap=4000, seed=0)
    fpc = np.sqrt((200 - 30) / (200 - 1))
    se = err.std() / np.sqrt(30) * fpc / np.sqrt(4000)
    assert abs(r.mae_mean - err.mean()) < 3 * se


def test_bootstrap_deterministic_and_errors():
    rng = np.random.default_rng(5)
    pred, true = rng.normal(size=40), rng.normal(size=40)
    assert bootstrap_mae(pred, true, seed=9) == bootstrap_mae(pred, true, seed=9)
    assert bootstrap_mae(pred, true, seed=9) != bootstrap_mae(pred, true, seed=10)
    with pytest.raises(AgeRegressionError):
        bootstrap_mae(pred[:10], true[:10], subset_size=30)


@pytest.fixture(scope="module")
def trained():
    cfg = SynthConfig(p=20, k=3, n_subjects=30, n_obs_per_subject=100, seed=2)
    train = sample_cohort(cfg)
    model = fit("MHA", 3, train.subjects.covariance_triples())
    ages = [s.age for s in train.subjects.subjects]
    age_model = fit_age_model(model.activity_matrix(train.subjects.ids), ages)
    test = sample_cohort(cfg, subject_offset=1000).subjects
    unseen = sample_cohort(cfg, subject_offset=2000).subjects
    return model, age_model, test, unseen


def test_transfer_does_not_mutate(trained):
    model, age_model, test, _ = trained
    before = (serialize.dumps(serialize.model_to_dict(model)), age_model_to_dict(age_model))
    r1 = transfer_evaluate(model, age_model, test, subset_size=20, n_bootstrap=100, seed=3)
    r2 = transfer_evaluate(model, age_model, test, subset_size=20, n_bootstrap=100, seed=3)
    after = (serialize.dumps(serialize.model_to_dict(model)), age_model_to_dict(age_model))
    assert before == after and r1 == r2


def test_transfer_same_distribution(trained):
    model, age_model, test, unseen = trained
    r_test = transfer_evaluate(model, age_model, test, subset_size=20, n_bootstrap=200, seed=0)
    r_new = transfer_evaluate(model, age_model, unseen, subset_size=20, n_bootstrap=200, seed=0)
    assert r_new.mae_mean < 2 * r_test.mae_mean


def test_transfer_dimension_mismatch(trained):
    model, age_model, _, _ = trained
    rng = np.random.default_rng(0)
    other = make_cohort([SubjectRecord(f"x{i}", rng.normal(size=(10, 7)), 40.0) for i in range(5)])
    with pytest.raises(DimensionMismatchError):
        transfer_evaluate(model, age_model, other, subset_size=5, n_bootstrap=2)


def test_age_model_roundtrip():
    m = AgeModel(np.array([0.1, 1 / 3, 2.0]), 54.31, True, 4, ("note",))
    back = age_model_from_dict(age_model_to_dict(m))
    np.testing.assert_array_equal(back.coefficients, m.coefficients)
    assert (back.intercept, back.use_intercept, back.rank, back.warnings) == (54.31, True, 4, ("note",))
    doc = age_model_to_dict(m)
    doc["schema_version"] = 99
    with pytest.raises(serialize.SchemaError):
        age_model_from_dict(doc)


def test_ledger_append(tmp_path):
    path = tmp_path / "ledger.csv"
    r = bootstrap_mae(np.arange(5.0), np.arange(5.0) + 1, subset_size=5, n_bootstrap=3)
    append_ledger(path, "run1", "MHA", 5, "test", r)
    append_ledger(path, "run2", "FA", 5, "hcp", r)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["run_id", "regime", "k", "dataset", "mae_mean", "mae_std", "seed"]
    assert [row[0] for row in rows[1:]] == ["run1", "run2"]
    assert float(rows[1][4]) == 1.0
