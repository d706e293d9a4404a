from datetime import date, timedelta

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from countyiv.data import (
    OUTCOME_CAPS,
    Codebook,
    DataError,
    Dataset,
    Event,
    Schema,
    balance_table,
    derive_pre_treatment_flags,
    encode_design,
    flag_pain,
    flag_sre,
    load_dataset,
    read_events,
    significance_stars,
    validate,
    write_dataset,
)

SCHEMA = Schema(("age", "diff_time"), ("North", "South", "West"))


def write_patients(tmp_path, rows, header="id,county,d,age,diff_time"):
    p = tmp_path / "patients.csv"
    p.write_text(header + "\n" + "\n".join(rows) + "\n")
    return p


def ten_rows():
    return [f"p{i},{['North', 'South', 'West'][i % 3]},{i % 2},{70 + i},{0.5 * i}" for i in range(10)]


def test_load_well_formed_fixture(tmp_path):
    ds = load_dataset(write_patients(tmp_path, ten_rows()), SCHEMA)
    assert len(ds) == 10
    assert ds.county_count == 3
    assert ds.covariates().shape == (10, 2)
    assert ds.period_length_days == 30


def test_unknown_county_names_row_and_label(tmp_path):
    rows = ten_rows()
    rows[3] = "p3,X,1,72,1.5"
    with pytest.raises(DataError, match=r"row 4.*'X'"):
        load_dataset(write_patients(tmp_path, rows), SCHEMA)


def test_treatment_outside_binary(tmp_path):
    rows = ten_rows()
    rows[0] = "p0,North,2,70,0"
    with pytest.raises(DataError, match="treatment must be 0/1"):
        load_dataset(write_patients(tmp_path, rows), SCHEMA)


def test_unparseable_cell_names_row_and_column(tmp_path):
    rows = ten_rows()
    rows[5] = "p5,South,1,abc,2.5"
    with pytest.raises(DataError, match=r"row 6, column 'age'"):
        load_dataset(write_patients(tmp_path, rows), SCHEMA)


def test_missing_column(tmp_path):
    with pytest.raises(DataError, match="missing column"):
        load_dataset(write_patients(tmp_path, ["p0,North,1,70"], "id,county,d,age"), SCHEMA)


def test_codebook_validation():
    with pytest.raises(DataError):
        Codebook(pain_atc=frozenset())
    with pytest.raises(DataError):
        Codebook(sre_icd=frozenset({"m84.4"}))


def test_event_codes_are_normalized(tmp_path):
    p = tmp_path / "events.csv"
    p.write_text("id,date,kind,code\np1,2016-03-01,inpatient,m84.4\np1,2016-02-01,prescription,N02AA01\n")
    ev = read_events(p)
    assert ev["code"].tolist() == ["N02AA01", "M844"]  # sorted by date
    p.write_text("id,date,kind,code\np1,2016-13-01,inpatient,M844\n")
    with pytest.raises(DataError, match="ISO-8601"):
        read_events(p)


# ---------------------------------------------------------------- flags


def brute_force_pain(events, codebook=Codebook()):
    groups = sorted(codebook.pain_atc)
    rx = [(d, next((g for g in groups if c.startswith(g)), None)) for d, k, c in events if k == "prescription"]
    rx = [(d, g) for d, g in rx if g]
    for start, _ in rx:
        inside = {g for d, g in rx if start <= d <= start + codebook.window_days - 1}
        if len(inside) == len(groups):
            return 1
    return 0


codes = st.sampled_from(["N02AA01", "N02AA05", "N02AX02", "N02BE01", "C09AA02", "N02BE51"])
events = st.lists(st.tuples(st.integers(0, 400), st.sampled_from(["prescription", "inpatient"]), codes),
                  max_size=12)


@settings(max_examples=300, deadline=None)
@given(events)
def test_pain_flag_matches_brute_force(ev):
    assert flag_pain(ev) == brute_force_pain(ev)


def test_pain_window_edges():
    # days 0 and 89 are inside one 90-day window, 0 and 90 are not
    inside = [(0, "prescription", "N02AA01"), (45, "prescription", "N02AX02"), (89, "prescription", "N02BE01")]
    outside = inside[:2] + [(90, "prescription", "N02BE01")]
    assert flag_pain(inside) == 1
    assert flag_pain(outside) == 0
    assert flag_pain([(d, "inpatient", c) for d, _, c in inside]) == 0


def test_pain_flag_accepts_dates_and_events():
    d0 = date(2017, 1, 1)
    ev = [Event(d0 + timedelta(days=o), "prescription", c) for o, c in
          [(0, "N02AA01"), (10, "N02AX02"), (20, "N02BE01")]]
    assert flag_pain(ev) == 1


def test_sre_flag_prefixes_and_kinds():
    assert flag_sre([(0, "inpatient", "M844")]) == 1
    assert flag_sre([(0, "inpatient", "M8440")]) == 1  # subcode
    assert flag_sre([(0, "inpatient", "M84.4")]) == 1
    assert flag_sre([(0, "prescription", "M844")]) == 0
    assert flag_sre([(0, "inpatient", "M84")]) == 0
    assert flag_sre([]) == 0


def test_derived_flags_reproduce_simulated_truth(panel_data):
    ds, truth = panel_data
    out = derive_pre_treatment_flags(ds)
    np.testing.assert_array_equal(out.column("pain_pre"), truth.pre_flags["pain_pre"])
    np.testing.assert_array_equal(out.column("sre_pre"), truth.pre_flags["sre_pre"])


# ---------------------------------------------------------------- balance


def test_balance_table_matches_independent_computation(cross_section):
    ds, _ = cross_section
    tab = balance_table(ds, ["age10", "comorb"])
    d = ds.d
    for row, col in zip(tab.rows, ["age10", "comorb"]):
        x = ds.column(col).astype(float)
        assert row.diff == pytest.approx(row.mean0 - row.mean1, abs=1e-12)
        assert row.mean0 == pytest.approx(x[d == 0].mean())
        p = stats.ttest_ind(x[d == 0], x[d == 1], equal_var=False).pvalue
        assert row.p_value == pytest.approx(p)


def test_stars_thresholds():
    assert significance_stars(0.005) == "***"
    assert significance_stars(0.03) == "**"
    assert significance_stars(0.07) == "*"
    assert significance_stars(0.2) == ""


# ---------------------------------------------------------------- panels


def panel_frame(spec):
    rows = []
    for pid, outcome, values in spec:
        rows += [{"id": pid, "period": t + 1, "outcome": outcome, "value": v} for t, v in enumerate(values)]
    return pd.DataFrame(rows)


def test_period_caps_enforced():
    assert OUTCOME_CAPS == {"dead": 70, "pain": 76, "sre": 64}
    frame = pd.DataFrame({"id": ["a"], "county": ["North"], "d": [1], "age": [70.0], "diff_time": [1.0]})
    panel = panel_frame([("a", "dead", [0] * 90), ("a", "pain", [0] * 90), ("a", "sre", [0] * 90)])
    ds = Dataset(frame, SCHEMA, panel=panel)
    assert ds.n_periods == {"dead": 70, "pain": 76, "sre": 64}
    assert ds.panel_matrix("sre").shape == (1, 64)


def test_death_is_absorbing():
    frame = pd.DataFrame({"id": ["a"], "county": ["North"], "d": [1], "age": [70.0], "diff_time": [1.0]})
    bad = Dataset(frame, SCHEMA, panel=panel_frame([("a", "dead", [0, 1, 0])]))
    with pytest.raises(DataError, match="after death"):
        validate(bad)
    ok = Dataset(frame, SCHEMA, panel=panel_frame([("a", "dead", [0, 0, 1])]))
    assert ok.death_period().tolist() == [3]
    assert ok.patients[0].alive_periods == 3


def test_subset_with_repeats_keeps_panels_unique(panel_data):
    ds, _ = panel_data
    sub = ds.subset([0, 0, 1])
    assert len(set(sub.ids)) == 3
    m = sub.panel_matrix("dead")
    np.testing.assert_array_equal(np.nan_to_num(m[0], nan=-1), np.nan_to_num(m[1], nan=-1))


def test_write_then_load_round_trip(tmp_path, panel_data):
    ds, _ = panel_data
    paths = write_dataset(ds, tmp_path)
    back = load_dataset(paths["patients"], ds.schema, paths["events"], paths["panel"])
    np.testing.assert_allclose(back.covariates()[~np.isnan(ds.covariates()).any(axis=1)],
                               ds.covariates()[~np.isnan(ds.covariates()).any(axis=1)], rtol=1e-9)
    np.testing.assert_array_equal(back.death_period(), ds.death_period())
    assert len(back.events) == len(ds.events)


def test_design_reference_is_first_present_county():
    frame = pd.DataFrame({"id": list("abcd"), "county": ["West", "South", "West", "South"],
                          "d": [0, 1, 0, 1], "age": [1.0, 2, 3, 4], "diff_time": [0.0, 1, 0, 1]})
    des = encode_design(Dataset(frame, SCHEMA))
    assert des.reference_county == "South"
    assert des.instrument_names == ("county[West]",)
    assert des.Q[:, 0].tolist() == [1.0, 0.0, 1.0, 0.0]


def test_categorical_dummies_drop_first_level():
    schema = Schema(("age",), ("North",), {"edu": ("low", "mid", "high")})
    frame = pd.DataFrame({"id": list("abc"), "county": ["North"] * 3, "d": [0, 1, 0],
                          "age": [1.0, 2, 3], "edu": ["low", "high", "mid"]})
    ds = Dataset(frame, schema)
    assert ds.covariate_names == ["age", "edu[mid]", "edu[high]"]
    np.testing.assert_array_equal(ds.covariates()[:, 1:], [[0, 0], [0, 1], [1, 0]])
