import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brainage.synth import (
    SynthConfig,
    SynthConfigError,
    recovery_error,
    recovery_error_bruteforce,
    rows_to_csv,
    run_study,
    sample_cohort,
    sample_loading,
    summarize,
    summary_to_csv,
)


def test_loading_is_exactly_feasible():
    for seed in range(100):
        W = sample_loading(50, 5, seed).values
        assert np.all(W >= 0)
        assert np.max(np.abs(W.T @ W - np.eye(5))) < 1e-14
        assert np.all((W != 0).sum(axis=1) == 1)
        assert np.all((W != 0).sum(axis=0) >= 1)


def test_loading_column_occupancy():
    counts = np.array([(sample_loading(50, 5, s).values != 0).sum(axis=0) for s in range(100)])
    assert abs(counts.mean() - 10.0) < 0.5


def test_loading_requires_k_below_p():
    with pytest.raises(SynthConfigError):
        sample_loading(5, 5, 0)


def test_config_validation():
    with pytest.raises(SynthConfigError):
        SynthConfig(p=5, k=6)
    with pytest.raises(SynthConfigError):
        SynthConfig(subject_noise=0.0)


def test_cohort_basic_invariants():
    c = sample_cohort(SynthConfig(p=20, k=3, n_subjects=40, n_obs_per_subject=30, seed=7))
    assert len(c.subjects) == 40 and c.subjects.p == 20
    assert all(np.all(g > 0) for g in c.true_activities.values())
    assert np.all((c.ground_truth_beta >= 0) & (c.ground_truth_beta <= 10))
    again = sample_cohort(SynthConfig(p=20, k=3, n_subjects=40, n_obs_per_subject=30, seed=7))
    for a, b in zip(c.subjects.subjects, again.subjects.subjects):
        np.testing.assert_array_equal(a.timeseries, b.timeseries)
        assert a.age == b.age


def test_single_subject_covariance_converges():
    c = sample_cohort(SynthConfig(p=10, k=2, n_subjects=1, n_obs_per_subject=100000, seed=3))
    W = c.ground_truth_loading.values
    sid = c.subjects.ids[0]
    S = W @ np.diag(c.true_activities[sid]) @ W.T + c.true_noise[sid] * np.eye(10)
    X = c.subjects.subjects[0].timeseries
    K = X.T @ X / len(X)
    assert np.linalg.norm(K - S) / np.linalg.norm(S) < 0.02


def test_mean_age():
    cfg = SynthConfig(p=6, k=2, n_subjects=4000, n_obs_per_subject=2, seed=5)
    c = sample_cohort(cfg)
    ages = np.array([s.age for s in c.subjects.subjects])
    # truncation at zero shifts the activity mean slightly above 2.5
    g_mean = np.mean([g for g in c.true_activities.values()], axis=0)
    assert abs(ages.mean() - g_mean @ c.ground_truth_beta) < 4 * ages.std() / np.sqrt(4000)
    assert abs(ages.mean() - 2.5 * c.ground_truth_beta.sum()) < 0.05 * 2.5 * c.ground_truth_beta.sum()


def test_offset_subjects_share_truth():
    cfg = SynthConfig(p=10, k=2, n_subjects=3, seed=1)
    a, b = sample_cohort(cfg), sample_cohort(cfg, subject_offset=100)
    np.testing.assert_array_equal(a.ground_truth_loading.values, b.ground_truth_loading.values)
    assert not set(a.subjects.ids) & set(b.subjects.ids)


def test_recovery_zero_under_permutation_and_sign():
    W = sample_loading(12, 4, 0).values
    assert recovery_error(W, W[:, [2, 0, 3, 1]]) == 0.0
    flipped = W.copy()
    flipped[:, 1] *= -1
    assert recovery_error(W, flipped) == 0.0


def test_recovery_hand_built():
    A = np.array([[1.0, 0.0], [0.0, 0.6], [0.0, 0.8]])
    B = np.array([[0.0, 0.9], [-0.5, 0.1], [-0.9, 0.0]])
    assert recovery_error(A, B) == pytest.approx(recovery_error_bruteforce(A, B), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5), st.integers(6, 12))
def test_recovery_matches_bruteforce(seed, k, p):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(p, k)), rng.normal(size=(p, k))
    e = recovery_error(A, B)
    assert e == pytest.approx(recovery_error_bruteforce(A, B), rel=1e-12)
    assert e == pytest.approx(recovery_error(B, A), rel=1e-12)
    perm = rng.permutation(k)
    assert e == pytest.approx(recovery_error(A[:, perm], B), rel=1e-12)
    assert e >= 0


def test_recovery_shape_mismatch():
    with pytest.raises(ValueError):
        recovery_error(np.zeros((4, 2)), np.zeros((4, 3)))


def test_run_study_counts_and_csv():
    base = SynthConfig(p=12, k=2, seed=0)
    rows = run_study("vary_n", [30], ["mha", "pca", "fa"], 1, base, n_held_out=10)
    assert len(rows) == 3
    assert [r.regime for r in rows] == ["MHA", "PCA", "FA"]
    assert all(r.status == "ok" and r.recovery_error >= 0 and r.mae >= 0 for r in rows)
    text = rows_to_csv(rows)
    assert text.splitlines()[0] == "axis_value,regime,seed,recovery_error,mae,status,message"
    assert len(text.splitlines()) == 4
    summary = summarize(rows)
    assert {(e["axis_value"], e["regime"]) for e in summary} == {(30, "MHA"), (30, "PCA"), (30, "FA")}
    assert summary_to_csv(summary).count("\n") == 4


def test_run_study_reproducible_and_parallel_safe():
    base = SynthConfig(p=10, k=2, seed=3)
    a = run_study("vary_N", [4, 6], ["mha"], 2, base, n_held_out=5)
    b = run_study("vary_N", [4, 6], ["mha"], 2, base, n_held_out=5, n_jobs=2)
    assert rows_to_csv(a) == rows_to_csv(b)
    assert [r.axis_value for r in a] == [4, 4, 6, 6]
    # same repeat seed across grid values
    assert a[0].seed == a[2].seed and a[0].seed != a[1].seed


def test_failed_cell_recorded(monkeypatch):
    import brainage.synth as synth
    from brainage.models import DivergenceError

    real = synth.evaluate_regime

    def flaky(cohort, held_out, regime, hyper=None, use_intercept=True):
        if regime == "PCA":
            raise DivergenceError("objective became non-finite", iteration=3, step_size=1.0)
        return real(cohort, held_out, regime, hyper, use_intercept)

    monkeypatch.setattr(synth, "evaluate_regime", flaky)
    rows = run_study("vary_n", [20], ["mha", "pca"], 1, SynthConfig(p=10, k=2, seed=0), n_held_out=3)
    assert [r.status for r in rows] == ["ok", "failed"]
    assert np.isnan(rows[1].mae) and "non-finite" in rows[1].message
    summary = {e["regime"]: e for e in summarize(rows)}
    assert summary["PCA"]["n_failed"] == 1 and summary["PCA"]["n_ok"] == 0


def test_study_argument_errors():
    base = SynthConfig(p=10, k=2, seed=0)
    with pytest.raises(SynthConfigError):
        run_study("vary_x", [1], ["mha"], 1, base)
    with pytest.raises(SynthConfigError):
        run_study("vary_n", [], ["mha"], 1, base)
    with pytest.raises(SynthConfigError):
        run_study("vary_n", [20], ["mha"], 0, base)
