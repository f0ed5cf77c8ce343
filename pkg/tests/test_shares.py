import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_panel
from shiftshare.bootstrap import BootstrapConfig
from shiftshare.data import stack_panel
from shiftshare.errors import DataError, DegenerateMomentsError
from shiftshare.overid_shares import influence_rows, run_shares_test, shares_influence
from shiftshare.tsls import fit_tsls


def dense_influence(y, x, W, Z, S, w):
    """Independent dense-inverse evaluation of the influence formula."""
    A = np.column_stack([Z, W])
    R = np.column_stack([x, W])
    Wd = np.diag(w)
    coef = np.linalg.inv(A.T @ Wd @ R) @ (A.T @ Wd @ y)
    eps = y - R @ coef
    G = S.T @ Wd @ R
    H = A.T @ Wd @ R
    U = np.empty_like(S)
    for i in range(len(y)):
        U[i] = w[i] * S[i] * eps[i] - G @ np.linalg.inv(H) @ (w[i] * A[i] * eps[i])
    return U, eps


def test_ten_observation_oracle():
    rng = np.random.default_rng(7)
    ds = make_panel(rng, n=10, T=1, p=3, d=2)
    design = stack_panel(ds)
    fit = fit_tsls(design, ds.control_names)
    U = influence_rows(design, fit, design.S_moment)
    U_ref, eps_ref = dense_influence(design.y, design.x, design.W, design.Z, design.S, design.weight)
    np.testing.assert_allclose(fit.eps_hat, eps_ref, atol=1e-10)
    np.testing.assert_allclose(U, U_ref, atol=1e-10)


def test_just_identified_moment_is_zero():
    rng = np.random.default_rng(3)
    ds = make_panel(rng, n=40, T=1, p=1, d=2)
    ds = ds.with_arrays(s_z=rng.uniform(0.1, 0.9, size=(40, 1, 1)), shock_z=np.ones((1, 1)))
    design = stack_panel(ds)
    fit = fit_tsls(design, ds.control_names)
    U = influence_rows(design, fit, design.S_moment)
    assert np.max(np.abs(U)) < 1e-8 * np.max(np.abs(design.weight * fit.eps_hat))
    raw = np.sum(design.weight * design.S_moment[:, 0] * fit.eps_hat)
    assert abs(raw) < 1e-8 * np.sum(np.abs(design.weight * design.Z * fit.eps_hat))


def test_singleton_clusters_reproduce_row_influence(panel):
    design = stack_panel(panel)
    fit = fit_tsls(design, panel.control_names)
    rows = np.array([f"r{r:04d}" for r in range(design.rows)])
    infl = shares_influence(design, fit, rows)
    U = influence_rows(design, fit, design.S_moment)
    sigma = U.std(axis=0)
    np.testing.assert_allclose(infl.psi_hat * infl.sigma_hat, U, atol=1e-12)
    np.testing.assert_allclose(infl.sigma_hat, sigma, rtol=1e-12)
    assert infl.b_eff == design.rows


def test_sigma_is_sd_of_cluster_sums(panel):
    design = stack_panel(panel)
    fit = fit_tsls(design, panel.control_names)
    infl = shares_influence(design, fit)
    U = influence_rows(design, fit, design.S_moment)
    labels = design.obs_cluster.astype(str)
    sums = np.array([U[labels == g].sum(axis=0) for g in sorted(set(labels))])
    np.testing.assert_allclose(infl.sigma_hat, sums.std(axis=0), rtol=1e-12)
    raw = (design.S_moment * (design.weight * fit.eps_hat)[:, None]).sum(axis=0) / sums.std(axis=0)
    np.testing.assert_allclose(infl.raw_stats, raw, rtol=1e-12)


def test_zero_residuals_take_degenerate_path(rng):
    ds = make_panel(rng, n=30, T=2, p=3)
    design = stack_panel(ds)
    W = ds.w
    ds = ds.with_arrays(y=2.0 * ds.x + W @ np.array([1.0, -0.5]))
    design = stack_panel(ds)
    fit = fit_tsls(design, ds.control_names)
    with pytest.raises(DegenerateMomentsError):
        shares_influence(design, fit)
    res = run_shares_test(ds, config=BootstrapConfig(B=50))
    assert res.T_n == 0.0 and res.p_value == 1.0 and not res.reject
    assert res.details["degenerate"] is True
    assert len(res.details["dropped_moments"]) == ds.p * ds.T


def test_fewer_than_two_clusters(rng):
    ds = make_panel(rng, n=12, n_clusters=1)
    with pytest.raises(DataError, match="at least 2 clusters"):
        run_shares_test(ds, config=BootstrapConfig(B=20))


def test_empty_sector_dropped_with_warning(rng):
    ds = make_panel(rng, n=30, T=2, p=4)
    s = np.array(ds.s_z)
    s[:, :, 2] = 0.0
    ds = ds.with_arrays(s_z=s)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        res = run_shares_test(ds, config=BootstrapConfig(B=50))
    assert any("degenerate" in str(r.message) for r in rec)
    assert sorted(res.details["dropped_moments"]) == sorted(
        f"{ds.sector_code[2]}@{t}" for t in ds.periods)
    assert res.details["q"] == 6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(1e-3, 1e3))
def test_weight_scale_invariance(seed, scale):
    ds = make_panel(np.random.default_rng(seed), n=25, T=2, p=3)
    cfg = BootstrapConfig(B=20, seed=1)
    a = run_shares_test(ds, config=cfg)
    b = run_shares_test(ds.with_arrays(reg_weight=np.asarray(ds.reg_weight) * scale), config=cfg)
    np.testing.assert_allclose([v for _, v in b.per_moment], [v for _, v in a.per_moment], rtol=1e-8)


def test_merging_clusters_sums_rows(panel):
    design = stack_panel(panel)
    fit = fit_tsls(design, panel.control_names)
    labels = design.obs_cluster.astype(str)
    merged = np.where(np.isin(labels, ["c0", "c1"]), "c0", labels)
    a = shares_influence(design, fit, labels)
    b = shares_influence(design, fit, merged)
    U_a = a.psi_hat * a.sigma_hat
    U_b = b.psi_hat * b.sigma_hat
    ga, gb = list(a.group_labels), list(b.group_labels)
    np.testing.assert_allclose(U_b[gb.index("c0")], U_a[ga.index("c0")] + U_a[ga.index("c1")], atol=1e-12)
    for g in gb:
        if g != "c0":
            np.testing.assert_allclose(U_b[gb.index(g)], U_a[ga.index(g)], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_influence_sums_to_raw_moment_with_intercept(seed):
    ds = make_panel(np.random.default_rng(seed), n=20, T=2, p=3, d=3)
    design = stack_panel(ds)
    fit = fit_tsls(design, ds.control_names)
    U = influence_rows(design, fit, design.S_moment)
    raw = design.S_moment.T @ (design.weight * fit.eps_hat)
    np.testing.assert_allclose(U.sum(axis=0), raw, rtol=1e-8, atol=1e-10 * np.abs(raw).max())


def test_period_selections(rng):
    ds = make_panel(rng, n=30, T=3, p=4)
    cfg = BootstrapConfig(B=30, seed=2)
    all_ = run_shares_test(ds, period_selection="all", config=cfg)
    pooled = run_shares_test(ds, period_selection="pooled", config=cfg)
    one = run_shares_test(ds, period_selection=ds.periods[1], config=cfg)
    refit = run_shares_test(ds, period_selection=1, config=cfg, refit_per_period=True)
    assert all_.details["q"] == 12 and pooled.details["q"] == 4 and one.details["q"] == 4
    assert all(lbl.endswith(f"@{ds.periods[1]}") for lbl, _ in one.per_moment)
    assert refit.details["beta_hat"] != one.details["beta_hat"]
    assert one.details["beta_hat"] == all_.details["beta_hat"]
    with pytest.raises(DataError, match="unknown period"):
        run_shares_test(ds, period_selection="1999", config=cfg)


def test_pooled_moment_is_sum_over_periods(rng):
    ds = make_panel(rng, n=30, T=2, p=3)
    design = stack_panel(ds)
    fit = fit_tsls(design, ds.control_names)
    we = design.weight * fit.eps_hat
    per = np.array([design.S_moment[design.period_index == t].T @ we[design.period_index == t]
                    for t in range(2)])
    pooled = run_shares_test(ds, period_selection="pooled", config=BootstrapConfig(B=20))
    infl = shares_influence(design, fit)
    np.testing.assert_allclose(infl.raw_stats * infl.sigma_hat, per.sum(axis=0), rtol=1e-10)
    assert pooled.T_n == pytest.approx(np.max(np.abs(infl.raw_stats)))


def test_sic_aggregation_reduces_moments(rng):
    codes = ["3711", "3714", "3721", "2011"]
    ds = make_panel(rng, n=40, T=1, p=4, codes=codes)
    res = run_shares_test(ds, sic_level=3, config=BootstrapConfig(B=20))
    assert res.details["q"] == 3
    assert {lbl.split("@")[0] for lbl, _ in res.per_moment} == {"371", "372", "201"}
