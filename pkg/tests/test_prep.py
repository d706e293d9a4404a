import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import subspace_angles

from countyiv.prep import (
    PrepError,
    factor_scores,
    fit_factor_analysis,
    knn_impute_categorical,
    mean_impute_continuous,
    standardize,
    varimax,
)


def two_factor_data(n=20000, seed=0):
    rng = np.random.default_rng(seed)
    L = np.array([[0.8, 0.0], [0.7, 0.1], [0.75, 0.0], [0.6, 0.2],
                  [0.0, 0.8], [0.1, 0.7], [0.0, 0.75], [0.2, 0.6]])
    F = rng.standard_normal((n, 2))
    uniq = 1 - (L**2).sum(axis=1)
    X = F @ L.T + rng.standard_normal((n, 8)) * np.sqrt(uniq)
    return X, L, F


def test_two_factor_subspace_recovered():
    X, L, _ = two_factor_data()
    fm = fit_factor_analysis(standardize(X), k=2)
    angle = np.degrees(subspace_angles(fm.loadings, L).max())
    assert angle < 5.0
    assert np.all((fm.communalities >= 0) & (fm.communalities <= 1))
    assert np.all(np.diff(fm.explained_variance) <= 1e-12)
    assert 0 < fm.cumulative_variance <= 1


def test_two_factor_scores_track_generating_factors():
    X, _, F = two_factor_data()
    fm = fit_factor_analysis(standardize(X), k=2)
    S = factor_scores(fm, standardize(X))
    assert np.allclose(S.mean(axis=0), 0, atol=1e-10)
    corr = np.abs(np.corrcoef(S.T, F.T)[:2, 2:])
    # each score matches one generating factor
    assert sorted(corr.max(axis=1)) > [0.9, 0.9]
    assert set(corr.argmax(axis=1)) == {0, 1}


def test_no_common_factor():
    rng = np.random.default_rng(3)
    p = 10
    fm = fit_factor_analysis(standardize(rng.standard_normal((20000, p))), k=1)
    # below the 0.2 display cut used for loadings tables
    assert np.abs(fm.loadings).max() < 0.2
    assert fm.cumulative_variance < 1.0 / p


def test_scores_linear_edge_cases():
    X, _, _ = two_factor_data(2000)
    fm = fit_factor_analysis(standardize(X), k=2)
    assert np.array_equal(factor_scores(fm, np.zeros((4, 8))), np.zeros((4, 2)))
    row = standardize(X)[0]
    np.testing.assert_allclose(factor_scores(fm, row)[0], row @ fm.score_weights)
    with pytest.raises(PrepError, match="schema mismatch"):
        factor_scores(fm, np.zeros((2, 7)))


def test_fit_errors():
    X = standardize(np.random.default_rng(0).standard_normal((100, 3)))
    with pytest.raises(PrepError):
        fit_factor_analysis(X, k=3)
    with pytest.raises(PrepError):
        fit_factor_analysis(X, k=0)
    X[0, 0] = np.nan
    with pytest.raises(PrepError, match="missing"):
        fit_factor_analysis(X, k=1)


def test_deterministic():
    X, _, _ = two_factor_data(3000, seed=1)
    a = fit_factor_analysis(standardize(X), k=2)
    b = fit_factor_analysis(standardize(X), k=2)
    assert np.array_equal(a.loadings, b.loadings)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_varimax_preserves_reproduced_correlations(seed, k):
    L = np.random.default_rng(seed).uniform(-0.9, 0.9, size=(9, k))
    Lr, R = varimax(L)
    np.testing.assert_allclose(Lr @ Lr.T, L @ L.T, atol=1e-10)
    np.testing.assert_allclose(R @ R.T, np.eye(k), atol=1e-10)


# ---------------------------------------------------------------- imputation


def brute_force_mode(targets, F, i, k):
    Fz = standardize(F)
    complete = [j for j, t in enumerate(targets) if t is not None]
    d = {j: float(np.linalg.norm(Fz[j] - Fz[i])) for j in complete}
    kth = sorted(d.values())[k - 1]
    near = [targets[j] for j in complete if d[j] <= kth + 1e-12]
    counts = {v: near.count(v) for v in near}
    top = max(counts.values())
    return min(v for v in counts if counts[v] == top)


def test_knn_majority_of_five():
    targets = ["A", "A", "A", "B", "B", None]
    F = np.array([[1.0, 0], [2, 0], [3, 0], [4, 0], [5, 0], [3, 0.1]])
    out = knn_impute_categorical(targets, F)
    assert out[-1] == "A" == brute_force_mode(targets, F, 5, 5)
    assert out[:5] == targets[:5]


def test_knn_unanimous_duplicates():
    targets = ["B"] * 5 + ["A", None]
    F = np.array([[0.0]] * 5 + [[10.0], [0.0]])
    assert knn_impute_categorical(targets, F)[-1] == "B"


def test_knn_tie_goes_to_smallest_label():
    targets = ["C", "B", "A", "B", "A", None]
    F = np.array([[1.0], [2], [3], [4], [5], [3]])
    assert knn_impute_categorical(targets, F)[-1] == "A"


@settings(max_examples=100, deadline=None)
@given(st.lists(st.sampled_from(["x", "y", "z", None]), min_size=8, max_size=15), st.integers(0, 999))
def test_knn_matches_brute_force(targets, seed):
    if sum(t is not None for t in targets) < 5:
        return
    F = np.random.default_rng(seed).integers(0, 4, size=(len(targets), 2)).astype(float)
    if np.any(F.std(axis=0) == 0):
        F[0, 0] += 1.0
    out = knn_impute_categorical(targets, F)
    for i, t in enumerate(targets):
        assert out[i] == (t if t is not None else brute_force_mode(targets, F, i, 5))


def test_knn_needs_enough_complete_rows():
    with pytest.raises(PrepError):
        knn_impute_categorical(["A", "B", None, None, None, None], np.arange(6.0)[:, None])


def test_mean_impute():
    assert mean_impute_continuous([2.0, 4.0, None]) == 3.0
    assert mean_impute_continuous([5.0, 5.0, 5.0]) == 5.0
    assert mean_impute_continuous([np.nan, 1.0, np.nan]) == 1.0
    with pytest.raises(PrepError):
        mean_impute_continuous([None, None, None])
