import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panelselect.data import (ModelSpec, build_design_matrices, load_panel_csv, make_dataset, normalize_panel,
                              validate_panel, write_panel_csv)
from panelselect.errors import ConfigError, ContractError, IntegrityError, ParseError, SchemaError

SPEC = ModelSpec(z_vars=("z",), x_vars=("x",), w_vars=("w",))


def frame(rows, covs=("z", "x", "w")):
    cols = ["person_id", "wave", "responded", "employed", "log_wage", "weight", *covs]
    return pd.DataFrame(rows, columns=cols)


def tiny():
    nan = np.nan
    return make_dataset(frame([
        ["a", 1, 1, 1, 2.0, 1.0, 0.1, 0.2, 0.3],
        ["a", 2, 1, 0, nan, 1.0, 0.4, 0.5, 0.6],
        ["a", 3, 0, nan, nan, 1.0, nan, nan, nan],
        ["b", 1, 1, 1, 1.5, 2.0, 1.1, 1.2, 1.3],
        ["b", 2, 1, 1, 1.7, 2.0, 1.4, 1.5, 1.6],
        ["b", 3, 1, 1, 1.9, 2.0, 1.7, 1.8, 1.9],
    ]))


def test_csv_round_trip_is_byte_identical(tmp_path, small_panel):
    p1 = tmp_path / "a.csv"
    text = write_panel_csv(small_panel, p1)
    back = load_panel_csv(p1)
    assert write_panel_csv(back) == text
    pd.testing.assert_frame_equal(back.frame, small_panel.frame)


def test_csv_missing_column(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("person_id,wave\n1,1\n")
    with pytest.raises(SchemaError, match="responded"):
        load_panel_csv(p)
    p.write_text("person_id,wave,responded,employed\n1,1,1,1\n")
    with pytest.raises(SchemaError, match="'z'"):
        load_panel_csv(p, SPEC)


def test_csv_parse_error_names_line(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("person_id,wave,responded,employed,log_wage\n1,1,1,1,2.0\n1,2,1,1,abc\n")
    with pytest.raises(ParseError, match="line 3"):
        load_panel_csv(p)
    p.write_text("person_id,wave,responded\n1,1.5,1\n")
    with pytest.raises(ParseError, match="integer"):
        load_panel_csv(p)


def test_csv_weight_defaults_to_one(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("person_id,wave,responded,employed,log_wage\n1,1,1,0,\n")
    ds = load_panel_csv(p)
    assert ds.frame["weight"].tolist() == [1.0]
    assert np.isnan(ds.frame["log_wage"].iloc[0])


def test_duplicate_rows_rejected():
    with pytest.raises(IntegrityError, match="person a at wave 1"):
        make_dataset(frame([["a", 1, 1, 0, np.nan, 1, 0, 0, 0]] * 2))


def test_valid_panel_passes(small_panel):
    assert validate_panel(tiny(), SPEC).ok
    assert validate_panel(small_panel).ok


@pytest.mark.parametrize("edits, kind", [
    # a leaves at wave 2, reappears at wave 3
    ({(1, "responded"): 0, (1, "employed"): np.nan, (2, "responded"): 1, (2, "employed"): 0,
      (2, "z"): 0.0, (2, "x"): 0.0, (2, "w"): 0.0}, "non-absorbing response at wave 3"),
    ({(1, "log_wage"): 1.0}, "wage under censoring"),
    ({(0, "responded"): 0, (0, "employed"): np.nan, (0, "log_wage"): np.nan}, "wave-1 non-response"),
    ({(4, "employed"): np.nan, (4, "log_wage"): np.nan}, "partial response (employment missing)"),
    ({(2, "employed"): 1.0}, "employment under non-response"),
    ({(3, "x"): np.nan}, "missing covariate x"),
    ({(5, "wave"): 4}, "non-contiguous waves"),
    ({(3, "employed"): 2.0}, "employed not 0/1"),
    ({(3, "weight"): -1.0}, "negative or missing weight"),
])
def test_each_violation_is_reported(edits, kind):
    f = tiny().frame.copy()
    for (row, col), value in edits.items():
        f.loc[row, col] = value
    rep = validate_panel(make_dataset(f, ["z", "x", "w"]), SPEC)
    assert kind in rep.kinds()


def test_violation_text_names_person_and_wave():
    f = tiny().frame.copy()
    f.loc[1, "log_wage"] = 1.0
    rep = validate_panel(make_dataset(f, ["z", "x", "w"]))
    assert [str(v) for v in rep] == ["person a: wage under censoring at wave 2"]


def test_normalize_panel_repairs():
    f = tiny().frame.copy()
    # b drops out at wave 2 but reappears at wave 3
    f.loc[4, ["responded", "employed", "log_wage"]] = [0, np.nan, np.nan]
    ds = make_dataset(f, ["z", "x", "w"])
    assert "non-absorbing response at wave 3" in validate_panel(ds).kinds()
    with pytest.warns(UserWarning, match="after attrition"):
        fixed = normalize_panel(ds)
    assert validate_panel(fixed).ok
    assert fixed.frame.query("person_id == 'b'")["wave"].tolist() == [1, 2]


def test_normalize_recodes_partial_response():
    f = tiny().frame.copy()
    f.loc[4, ["employed", "log_wage"]] = [np.nan, np.nan]
    with pytest.warns(UserWarning):
        fixed = normalize_panel(make_dataset(f, ["z", "x", "w"]))
    assert validate_panel(fixed).ok
    assert fixed.frame.query("person_id == 'b'")["responded"].tolist() == [1, 0]


def test_model_spec_exclusion_restriction():
    with pytest.raises(ConfigError, match="exclusion restriction"):
        ModelSpec(z_vars=("w",), x_vars=("x",), w_vars=("w",))
    ModelSpec(z_vars=("w",), x_vars=("x",), w_vars=("w",), allow_nonlinear_identification=True)
    with pytest.raises(ConfigError):
        ModelSpec(z_vars=("z",), x_vars=("x",), w_vars=("w",), weight_mode="per-row")
    with pytest.raises(ConfigError):
        ModelSpec(z_vars=("z",), x_vars=("x",), w_vars=("w",), wave_dummies={"hours": True})


def test_design_rows_and_lags():
    d = build_design_matrices(tiny(), SPEC)
    # attrition decisions: a at 2 (stay) and 3 (leave); b at 2 and 3
    assert d.attrition.y.tolist() == [1, 0, 1, 1]
    assert d.attrition.wave.tolist() == [2, 3, 2, 3]
    # covariates are the wave t-1 values
    assert d.attrition.X[:, 1].tolist() == [0.1, 0.4, 1.1, 1.4]
    assert d.employment.y.tolist() == [1, 0, 1, 1, 1]
    assert d.wage.y.tolist() == [2.0, 1.5, 1.7, 1.9]
    assert np.isnan(d.wage.z_lagged[0]).all()
    np.testing.assert_array_equal(d.wage.z_lagged[2], [1.0, 1.1])
    np.testing.assert_array_equal(d.z_lagged(1, 3), [1.0, 1.4])
    with pytest.raises(ContractError):
        d.z_lagged(0, 1)
    assert d.person_weight.tolist() == [1.0, 1.0]  # unweighted by default


def test_design_weights_and_dummies():
    spec = ModelSpec(("z",), ("x",), ("w",), wave_dummies={"attrition": True, "employment": True, "wage": True},
                     weight_mode="per-person")
    d = build_design_matrices(tiny(), spec)
    assert d.attrition.names == ("const", "z", "wave3")
    assert d.employment.names == ("const", "x", "wave2", "wave3")
    assert d.wage.names == ("const", "w", "wave2", "wave3")
    assert d.person_weight.tolist() == [1.0, 2.0]


def test_design_dimensions_on_simulated_panel(small_panel):
    spec = ModelSpec(("x1", "moved"), ("x1", "female", "nonlabor"), ("x1", "female", "exper"),
                     wave_dummies={"attrition": True, "employment": True, "wage": True})
    d = build_design_matrices(small_panel, spec)
    T = small_panel.T_max
    assert d.attrition.k == 1 + 2 + (T - 2)
    assert d.employment.k == 1 + 3 + (T - 1)
    assert d.wage.k == 1 + 3 + (T - 1)
    n_resp = int(small_panel.frame["responded"].sum())
    assert len(d.employment) == n_resp
    # every attrition decision follows a response
    assert len(d.attrition) == n_resp - int(((small_panel.frame["wave"] == T) & (small_panel.frame["responded"] == 1)).sum())


def test_design_requires_model_variables(small_panel):
    with pytest.raises(SchemaError):
        build_design_matrices(small_panel, ModelSpec(("nope",), ("x1",), ("exper",)))


def test_take_resamples_persons():
    d = build_design_matrices(tiny(), SPEC)
    r = d.take(np.array([1, 1, 0]))
    assert r.n_persons == 3
    assert list(r.person_ids) == ["b#0", "b#1", "a#2"]
    assert r.employment.y.tolist() == [1, 1, 1, 1, 1, 1, 1, 0]
    assert r.wage.person.tolist() == [0, 0, 0, 1, 1, 1, 2]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 5), st.integers(0, 5)), min_size=1, max_size=12))
def test_absorbing_records_always_validate(people):
    rows = []
    for i, (stay, drop) in enumerate(people):
        for t in range(1, stay + 1):
            rows.append([f"p{i}", t, 1, t % 2, 1.0 if t % 2 else np.nan, 1.0, 0.0, 0.0, 0.0])
        if drop:
            rows.append([f"p{i}", stay + 1, 0, np.nan, np.nan, 1.0, np.nan, np.nan, np.nan])
    ds = make_dataset(frame(rows))
    assert validate_panel(ds, SPEC).ok
    d = build_design_matrices(ds, SPEC)
    assert len(d.attrition) == sum(stay - 1 + bool(drop) for stay, drop in people)
    assert int((d.attrition.y == 0).sum()) == sum(bool(drop) for _, drop in people)
