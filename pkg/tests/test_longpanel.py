import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_panel
from shiftshare.errors import DataError
from shiftshare.longpanel import (
    auto_bandwidth,
    bartlett_lrv,
    decompose_score,
    longpanel_fit,
    longpanel_se,
    small_sample_factor,
    unweighted_design,
    variance_formula,
)
from shiftshare.tsls import fit_tsls


def fit_and_decompose(ds):
    fit = fit_tsls(unweighted_design(ds))
    return fit, decompose_score(ds, fit)


def test_single_unit_has_no_panel_component(rng):
    ds = make_panel(rng, n=1, T=12, p=3, n_clusters=1)
    fit, dec = fit_and_decompose(ds)
    assert np.all(dec.nu_hat == 0.0)
    eps = fit.eps_hat.reshape(1, 12)
    np.testing.assert_allclose(dec.zeta_hat, ds.s_z[0] * eps[0][:, None], rtol=1e-15)


def test_panel_component_mean_zero_each_period(rng):
    ds = make_panel(rng, n=40, T=15, p=5)
    _, dec = fit_and_decompose(ds)
    scale = np.abs(dec.nu_hat).max()
    assert np.max(np.abs(dec.nu_hat.mean(axis=0))) < 1e-12 * max(scale, 1.0)


def test_small_panel_second_path():
    rng = np.random.default_rng(4)
    ds = make_panel(rng, n=4, T=3, p=2, n_clusters=2)
    fit, dec = fit_and_decompose(ds)
    eps = fit.eps_hat.reshape(4, 3)
    for t in range(3):
        zeta = [sum(ds.s_z[i, t, j] * eps[i, t] for i in range(4)) / 4 for j in range(2)]
        ts = sum(ds.shock_z[t, j] * zeta[j] for j in range(2))
        assert dec.ts_series[t] == pytest.approx(ts, rel=1e-12, abs=1e-15)
        score_t = sum(ds.instrument[i, t] * eps[i, t] for i in range(4)) / 4
        assert dec.ts_series[t] + dec.nu_hat[:, t].mean() == pytest.approx(score_t, abs=1e-10)
    assert dec.D_hat == pytest.approx(np.mean(ds.x * ds.instrument), rel=1e-14)


def test_decomposition_needs_two_periods(rng):
    ds = make_panel(rng, n=10, T=1)
    with pytest.raises(DataError, match="T >= 2"):
        longpanel_fit(ds)


def test_bandwidth_rule():
    assert auto_bandwidth(50) == 4
    assert auto_bandwidth(8) == 2
    assert auto_bandwidth(1000) == 13


def test_bartlett_matches_loop():
    u = np.random.default_rng(3).standard_normal(40)
    L = 3
    v = u - u.mean()
    ref = sum(v[t] * v[t] for t in range(40)) / 40
    for lag in range(1, L + 1):
        ref += 2 * (1 - lag / (L + 1)) * sum(v[t] * v[t - lag] for t in range(lag, 40)) / 40
    assert bartlett_lrv(u, L) == pytest.approx(ref, rel=1e-12)
    assert bartlett_lrv(u, 0) == pytest.approx(v.var(), rel=1e-12)


def test_small_sample_factor_unbiased_for_zero_sum_white_noise():
    rng = np.random.default_rng(8)
    T, L = 25, 3
    assert small_sample_factor(T, L) == pytest.approx(1 / (1 - 4 / 25))
    assert small_sample_factor(2, 1) == 1.0
    est = [small_sample_factor(T, L) * bartlett_lrv(rng.standard_normal(T), L) for _ in range(20000)]
    assert np.mean(est) == pytest.approx(1.0, abs=3 * np.std(est) / np.sqrt(len(est)))


def test_doubling_T_halves_time_series_term():
    a = variance_formula(2.0, 3.0, 0.0, 100, 20)
    b = variance_formula(2.0, 3.0, 0.0, 100, 40)
    assert b == a / 2


def test_se_formula_invariant(rng):
    ds = make_panel(rng, n=50, T=20, p=4)
    _, dec, var = longpanel_fit(ds)
    expected = (var.var_zeta / var.T + var.var_nu / (var.n * var.T)) / var.D_hat**2
    assert var.se_beta**2 == pytest.approx(expected, rel=1e-12)
    assert var.time_series_term + var.panel_term == pytest.approx(var.se_beta**2, rel=1e-12)
    assert var.var_zeta >= 0 and var.var_nu >= 0
    raw = longpanel_se(dec, bias_correct=False)
    assert raw.var_zeta == var.var_zeta_uncorrected
    plain = longpanel_se(dec, bias_correct=False, small_sample=False)
    assert plain.var_zeta * var.small_sample_factor == pytest.approx(var.var_zeta_uncorrected, rel=1e-14)
    assert var.var_zeta == max(var.var_zeta_uncorrected - var.var_nu / var.n, 0.0)


def test_var_nu_one_pass_two_pass(rng):
    ds = make_panel(rng, n=30, T=12, p=3)
    _, dec, var = longpanel_fit(ds)
    v = dec.nu_hat.ravel()
    N = v.size
    one_pass = np.sum(v * v) / N - (np.sum(v) / N) ** 2
    two_pass = np.sum((v - v.mean()) ** 2) / N
    assert var.var_nu == pytest.approx(one_pass, rel=1e-10)
    assert var.var_nu == pytest.approx(two_pass, rel=1e-10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_se_invariant_to_unit_and_sector_permutation(seed):
    rng = np.random.default_rng(seed)
    ds = make_panel(rng, n=25, T=12, p=5)
    se = longpanel_fit(ds)[2].se_beta
    pu = rng.permutation(ds.n)
    ps = rng.permutation(ds.p)
    perm = ds.with_arrays(
        y=ds.y[pu], x=ds.x[pu], w=ds.w[pu], s_z=ds.s_z[pu][:, :, ps], shock_z=ds.shock_z[:, ps],
        reg_weight=ds.reg_weight[pu], obs_cluster=ds.obs_cluster[pu],
        sector_code=ds.sector_code[ps], sector_cluster=ds.sector_cluster[ps],
    )
    assert longpanel_fit(perm)[2].se_beta == pytest.approx(se, rel=1e-10)


def test_short_panel_warns(rng):
    ds = make_panel(rng, n=30, T=5)
    with pytest.warns(UserWarning, match="T=5"):
        longpanel_fit(ds)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        longpanel_fit(make_panel(rng, n=30, T=12))


def test_negative_bandwidth_rejected(rng):
    _, dec = fit_and_decompose(make_panel(rng, n=10, T=12))
    with pytest.raises(DataError):
        longpanel_se(dec, bandwidth=-1)


def shares_null_panel(rng, n=200, T=50, p=10):
    """Shares independent of the structural error: the time-series score vanishes."""
    s = rng.dirichlet(np.ones(p), size=(n, T))
    shock = rng.standard_normal((T, p))
    Z = np.einsum("itp,tp->it", s, shock)
    u = rng.standard_normal((n, T))
    x = Z + 0.5 * u + rng.standard_normal((n, T))
    y = x + u
    codes = [f"{1000 + j}" for j in range(p)]
    from shiftshare.data import PanelDataset
    return PanelDataset(
        y=y, x=x, w=np.zeros((n, T, 0)), s_z=s, shock_z=shock, reg_weight=np.ones((n, T)),
        obs_cluster=np.repeat(np.array([f"u{i}" for i in range(n)], dtype=object)[:, None], T, axis=1),
        sector_code=np.array(codes, dtype=object), sector_cluster=np.array(codes, dtype=object),
    )


def test_time_series_term_small_under_shares_null():
    rng = np.random.default_rng(99)
    shares = []
    for _ in range(20):
        var = longpanel_fit(shares_null_panel(rng))[2]
        shares.append(var.time_series_term / var.se_beta**2)
    assert np.median(shares) < 0.05
