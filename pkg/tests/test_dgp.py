import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import norm

from panelselect.data import validate_panel
from panelselect.dgp import DEFAULT_PARAMS, TrueParams, implied_sigma, simulate_panel
from panelselect.errors import ParameterError


@pytest.fixture(scope="module")
def big():
    return simulate_panel(DEFAULT_PARAMS, 40000, seed=21, return_latent=True)


def test_latent_covariance_matches_sigma(big):
    _, lat = big
    u = lat.loc[lat["wave"] == 1, ["u1", "u2", "u3"]].to_numpy()
    np.testing.assert_allclose(np.cov(u, rowvar=False), implied_sigma(DEFAULT_PARAMS), atol=0.015)


def test_implied_sigma_formula():
    p = replace(DEFAULT_PARAMS, s1=0.3, s2=0.4, s3=1.5)
    S = implied_sigma(p)
    assert S[0, 0] == pytest.approx(0.25)
    assert S[0, 1] == pytest.approx(0.6)
    assert S[1, 1] == pytest.approx(2.25)
    assert np.all(np.linalg.eigvalsh(S) >= -1e-12)


def test_survival_without_heterogeneity():
    # with u1 = 0 and iid covariates, staying is a sequence of Bernoulli trials
    p = replace(DEFAULT_PARAMS, s1=0.0, s2=0.0, sigma13=0.0)
    ds = simulate_panel(p, 40000, seed=5)
    th = p.theta
    scale = math.sqrt(1 + th[1] ** 2)
    stay = 0.8 * norm.cdf(th[0] / scale) + 0.2 * norm.cdf((th[0] + th[2]) / scale)
    f = ds.frame
    for t in range(1, p.T + 1):
        share = ((f["wave"] == t) & (f["responded"] == 1)).sum() / 40000
        assert share == pytest.approx(stay ** (t - 1), abs=0.01)


def test_wave1_employment_rate(big):
    ds, _ = big
    a = DEFAULT_PARAMS.alpha
    scale = math.sqrt(1 + a[1] ** 2 + a[3] ** 2 + DEFAULT_PARAMS.s3 ** 2)
    want = 0.5 * norm.cdf(a[0] / scale) + 0.5 * norm.cdf((a[0] + a[2]) / scale)
    f = ds.frame
    assert f.loc[f["wave"] == 1, "employed"].mean() == pytest.approx(want, abs=0.01)


def test_records_are_absorbing_and_valid(big):
    ds, lat = big
    assert validate_panel(ds, DEFAULT_PARAMS.model_spec()).ok
    f = ds.frame
    assert (f.loc[f["wave"] == 1, "responded"] == 1).all()
    last = f.groupby("person_id")["responded"].agg(["last", "size", "sum"])
    # a record ends either at T or at its single non-response row
    assert ((last["last"] == 1) & (last["size"] == DEFAULT_PARAMS.T) | (last["size"] == last["sum"] + 1)).all()
    assert len(lat) == 40000 * DEFAULT_PARAMS.T


def test_wages_only_for_employed(big):
    ds, lat = big
    f = ds.frame
    assert (f["log_wage"].notna() == ((f["responded"] == 1) & (f["employed"] == 1))).all()
    obs = lat.query("observed and employed_star")
    merged = f.dropna(subset=["log_wage"]).merge(obs, on=["person_id", "wave"])
    assert len(merged) == len(obs)
    np.testing.assert_array_equal(merged["log_wage"], merged["y_star"])


def test_positive_covariances_bias_observed_wages_up(big):
    _, lat = big
    observed = lat.loc[lat["observed"] & lat["employed_star"], "y_star"].mean()
    assert observed > lat["y_star"].mean() + 0.02


def test_deterministic_and_prefix_stable():
    a = simulate_panel(DEFAULT_PARAMS, 300, seed=9)
    b = simulate_panel(DEFAULT_PARAMS, 300, seed=9)
    assert a.frame.equals(b.frame)
    c = simulate_panel(DEFAULT_PARAMS, 1000, seed=9)
    # person i keeps its record when n grows (ids are zero-padded differently)
    first = c.frame[c.frame["person_id"].astype(int) <= 300].reset_index(drop=True)
    first = first.assign(person_id=first["person_id"].astype(int))
    ref = a.frame.assign(person_id=a.frame["person_id"].astype(int))
    assert first.sort_values(["person_id", "wave"]).reset_index(drop=True).equals(ref)
    assert not simulate_panel(DEFAULT_PARAMS, 300, seed=10).frame.equals(a.frame)


def test_replicate_weight_columns():
    ds = simulate_panel(DEFAULT_PARAMS, 500, seed=3, replicate_weights=20)
    cols = [f"bsw{i}" for i in range(1, 21)]
    assert set(cols) <= set(ds.covariate_names)
    per_person = ds.frame.groupby("person_id")[cols].first()
    assert (ds.frame.groupby("person_id")[cols].nunique() == 1).all().all()
    np.testing.assert_allclose(per_person.sum(), 500)


def test_invalid_parameters():
    with pytest.raises(ParameterError, match="positive semidefinite"):
        replace(DEFAULT_PARAMS, sigma13=2.0, sd_u3=0.1)
    with pytest.raises(ParameterError):
        replace(DEFAULT_PARAMS, theta=(1.0,))
    with pytest.raises(ParameterError):
        replace(DEFAULT_PARAMS, T=1)
    with pytest.raises(ParameterError):
        simulate_panel(DEFAULT_PARAMS, 0, seed=1)


def test_params_dict_round_trip():
    d = DEFAULT_PARAMS.to_dict()
    assert TrueParams.from_dict(d) == DEFAULT_PARAMS
