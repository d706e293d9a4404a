import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import ndtr

from countyiv.data import Dataset
from countyiv.first_stage import fit_probit
from countyiv.outcome import Theta, loglik, outcome_data
from countyiv.simulate import DgpConfig, HazardParams, simulate
from countyiv.survival import (
    SurvivalConfig,
    SurvivalCurves,
    SurvivalTheta,
    curves_from_hazards,
    fit_survival,
    hazard_matrix,
    hazard_prob,
    overall_effect,
    survival_curves,
    survival_loglik,
    survival_rows,
)

from conftest import small_dataset


def mortality_dataset(death, follow, seed=0):
    n = len(death)
    base = small_dataset(n=n, counties=("A", "B", "C"), seed=seed)
    rows = []
    for i in range(n):
        last = death[i] or follow[i]
        rows += [(f"p{i}", t, "dead", int(t == death[i])) for t in range(1, last + 1)]
    return Dataset(frame=base.frame, schema=base.schema,
                   panel=pd.DataFrame(rows, columns=["id", "period", "outcome", "value"]))


def flat_theta(xi, p=2, q=2, rho=(0.0, 0.0), delta1=0.0):
    return SurvivalTheta(np.asarray(xi, float), np.zeros(p), delta1, np.zeros(p), np.zeros(1 + p + q),
                         rho[0], rho[1], np.zeros(p))


# ---------------------------------------------------------------- hazards


def test_hazard_reduces_to_probit_at_zero_correlation():
    th = flat_theta([-1.0, -0.5], delta1=0.3)
    th.delta = np.array([0.2, -0.1])
    x = np.array([1.0, 2.0])
    assert hazard_prob(th, x, 1, 1, 2) == pytest.approx(ndtr(-0.5 + 0.2 - 0.2 + 0.3), abs=1e-12)
    assert hazard_prob(th, x, 1, 0, 1) == pytest.approx(ndtr(-1.0 + 0.0), abs=1e-12)


def test_hazard_vanishes_as_baseline_falls():
    th = flat_theta([-np.inf, -40.0], rho=(0.5, 0.5))
    assert hazard_prob(th, np.zeros(2), 0, 1, 1) == 0.0
    assert hazard_prob(th, np.zeros(2), 0, 1, 2) < 1e-300
    with pytest.raises(ValueError):
        hazard_prob(th, np.zeros(2), 0, 1, 3)


def test_hazard_matrix_matches_pointwise():
    rng = np.random.default_rng(0)
    th = flat_theta([-1.0, -np.inf, -0.7], rho=(0.4, -0.3), delta1=0.2)
    th.gamma = rng.normal(0, 0.5, 5)
    ds = small_dataset(n=6, seed=1)
    od = outcome_data(ds)
    P = hazard_matrix(th, od.X, od.Z, od.d)
    county = od.Z[:, 3:] @ np.array([1, 2])
    for i in range(6):
        for t in (1, 2, 3):
            assert P[i, t - 1] == pytest.approx(hazard_prob(th, od.X[i], int(county[i]), int(od.d[i]), t), abs=1e-13)


# ---------------------------------------------------------------- likelihood structure


def test_death_at_three_gives_three_rows():
    ds = mortality_dataset([3, 0, 1, 2, 0, 4], [5, 5, 5, 5, 2, 5])
    sd = survival_rows(ds, SurvivalConfig(n_periods=5))
    assert (sd.patient == 0).sum() == 3
    assert sd.rows.y[sd.patient == 0].tolist() == [0, 0, 1]
    # survivors through T-1 contribute T-1 rows, censored ones their follow-up
    assert (sd.patient == 1).sum() == 4 and (sd.patient == 4).sum() == 2


def test_zero_death_periods_fixed():
    ds = mortality_dataset([1, 3, 0, 1, 3, 0] * 5, [4] * 30)
    sd = survival_rows(ds, SurvivalConfig(n_periods=4))
    assert sd.free_periods.tolist() == [1, 3]
    fit = fit_survival(ds, SurvivalConfig(n_periods=4))
    assert fit.theta.xi[1] == -np.inf and np.isfinite(fit.theta.xi[[0, 2]]).all()
    assert any("zero hazard" in n for n in fit.notes)


def test_single_period_reduces_to_outcome_likelihood(panel_data):
    ds, _ = panel_data
    rng = np.random.default_rng(2)
    sd = survival_rows(ds, SurvivalConfig(n_periods=2))
    b = sd.base
    th = SurvivalTheta([-1.3], rng.normal(0, 0.1, b.X.shape[1]), 0.3, rng.normal(0, 0.1, len(b.het)),
                       rng.normal(0, 0.1, b.Z.shape[1]), 0.4, 0.2, b.xbar, b.het)
    y1 = (ds.death_period() == 1).astype(float)
    od = outcome_data(ds, y=y1)
    cross = Theta(-1.3, th.delta, th.delta1, th.deltaD, th.gamma, th.rho0, th.rho1, od.xbar, od.het)
    assert survival_loglik(th, ds, SurvivalConfig(n_periods=2)) == loglik(cross, od)


def test_period_weighting_counts_treatment_each_row(panel_data):
    ds, _ = panel_data
    pat = survival_rows(ds, SurvivalConfig())
    per = survival_rows(ds, SurvivalConfig(treatment_weight="period"))
    assert pat.rows.conditional.sum() > 0 and per.rows.conditional.sum() == 0
    with pytest.raises(ValueError):
        survival_rows(ds, SurvivalConfig(treatment_weight="both"))


def test_zero_correlation_matches_stacked_probit():
    panels = {"dead": HazardParams(baseline=-2.0, rho0=0.0, rho1=0.0),
              "pain": HazardParams(), "sre": HazardParams()}
    ds, _ = simulate(DgpConfig(n=3000, seed=8, n_periods=8, panels=panels, extras=False))
    fit = fit_survival(ds)
    sd = survival_rows(ds)
    stacked = fit_probit(sd.rows.y, sd.rows.J)
    j = len(sd.free_periods) + sd.base.X.shape[1]
    assert abs(fit.estimate("delta1") - stacked.gamma[j]) < 2 * fit.se("delta1")


def test_fit_recovers_treatment_effect(panel_data):
    ds, truth = panel_data
    fit = fit_survival(ds)
    assert fit.converged
    true_d1 = truth.panels["dead"]["delta1"]
    assert abs(fit.estimate("delta1") - true_d1) < 4 * fit.se("delta1")
    assert SurvivalTheta.from_dict(fit.theta.to_dict()).to_dict() == fit.theta.to_dict()


# ---------------------------------------------------------------- curves


def test_constant_hazard_closed_form():
    p, T = 0.07, 12
    P = np.full((50, T), p)
    d = np.r_[np.ones(25), np.zeros(25)]
    c = curves_from_hazards(P, d, np.ones((50, T), bool))
    t = np.arange(1, T + 1)
    np.testing.assert_allclose(c.s1, (1 - p) ** t, rtol=0, atol=1e-10)
    np.testing.assert_allclose(c.s0, (1 - p) ** t, rtol=0, atol=1e-10)


def test_constant_hazard_through_the_model():
    th = flat_theta([-1.5] * 9)
    ds = small_dataset(n=40, seed=2)
    od = outcome_data(ds)
    c = curves_from_hazards(hazard_matrix(th, od.X, od.Z, od.d), od.d, np.ones((40, 9), bool))
    np.testing.assert_allclose(c.s1, (1 - ndtr(-1.5)) ** np.arange(1, 10), atol=1e-10)


def test_zero_hazard_gives_unit_survival():
    c = curves_from_hazards(np.zeros((10, 5)), np.arange(10) % 2, np.ones((10, 5), bool))
    assert np.all(c.s1 == 1) and np.all(c.s0 == 1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 30), st.integers(1, 15))
def test_curves_nonincreasing_on_a_fixed_risk_set(seed, n, T):
    rng = np.random.default_rng(seed)
    P = rng.uniform(0, 1, (n, T)) ** 3
    d = np.r_[0, 1, rng.integers(0, 2, n - 2)]
    c = curves_from_hazards(P, d, np.ones((n, T), bool))
    assert np.all(np.diff(c.s1) <= 1e-15) and np.all(np.diff(c.s0) <= 1e-15)


def test_risk_set_average_can_rise_when_frail_patients_leave():
    # averaging over the shrinking risk set is not a product; documented behaviour
    P = np.array([[0.5, 0.0], [0.1, 0.0], [0.2, 0.2]])
    at_risk = np.array([[True, False], [True, True], [True, True]])
    c = curves_from_hazards(P, np.array([1, 1, 0]), at_risk)
    assert c.s1[1] > c.s1[0]


def test_empty_risk_set_truncates_with_note():
    at_risk = np.ones((4, 5), bool)
    at_risk[:, 3:] = [[True, True], [False, False], [True, True], [False, False]]
    c = curves_from_hazards(np.full((4, 5), 0.1), np.array([1, 1, 0, 0]), at_risk)
    assert c.s1.size == 5
    at_risk[0, 3:] = False
    c = curves_from_hazards(np.full((4, 5), 0.1), np.array([1, 1, 0, 0]), at_risk)
    assert c.s1.size == 3 and "empty risk set at period 4" in c.notes[0]


def test_curves_invariant_to_patient_order(panel_data):
    ds, _ = panel_data
    fit = fit_survival(ds)
    a = survival_curves(fit, ds)
    perm = np.random.default_rng(0).permutation(len(ds))
    b = survival_curves(fit, ds.subset(perm))
    np.testing.assert_allclose(a.s1, b.s1, atol=1e-13)
    np.testing.assert_allclose(a.s0, b.s0, atol=1e-13)
    assert np.all(np.diff(a.s1) <= 0) and np.all(np.diff(a.s0) <= 0)


# ---------------------------------------------------------------- overall effect


def curves(s1, s0):
    s1, s0 = np.asarray(s1, float), np.asarray(s0, float)
    return SurvivalCurves(s1, s0, np.ones((len(s1), 2), int), ())


def test_overall_effect_examples():
    t = np.arange(1, 6)
    c = curves(np.ones(5), 0.9**t)
    assert overall_effect(c, 2) == pytest.approx(2 - (0.9 + 0.81), abs=1e-12)
    assert overall_effect(c, 2) == pytest.approx(0.29)
    assert overall_effect(curves(0.9**t, 0.9**t)) == 0
    assert overall_effect(curves(0.9**t, np.ones(5)), 3) == -overall_effect(c, 3)
    for T in range(1, 6):
        assert overall_effect(c, T) - overall_effect(c, T - 1) == pytest.approx(c.s1[T - 1] - c.s0[T - 1])
    with pytest.raises(ValueError):
        overall_effect(c, 6)
    with pytest.raises(ValueError):
        overall_effect(curves([1, 1], [1]))
