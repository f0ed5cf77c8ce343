import json
import math

import numpy as np
import pytest

from shiftshare.data import PanelDataset
from shiftshare.errors import DataError
from shiftshare.overid_shares import run_shares_test
from shiftshare.overid_shocks import run_shocks_test
from shiftshare.bootstrap import BootstrapConfig
from shiftshare.simulate import (
    SharesDgp,
    common_shock_variances,
    fit_shares_dgp,
    fit_shocks_dgp,
    moulton_fit,
    rejection_study,
    simulate_shares_dgp,
    simulate_shocks_dgp,
    synthetic_shares_base,
    synthetic_shocks_base,
)


@pytest.fixture(scope="module")
def shares_base():
    return synthetic_shares_base()


@pytest.fixture(scope="module")
def shocks_base():
    return synthetic_shocks_base()


def structural_error(dgp, ds):
    return ds.y - dgp.beta_hat * ds.x - ds.w @ dgp.gamma_hat


def hc0_se(X, y):
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    u = y - X @ coef
    bread = np.linalg.inv(X.T @ X)
    meat = X.T @ (X * (u**2)[:, None])
    return coef, np.sqrt(np.diag(bread @ meat @ bread))


# --- bases ---------------------------------------------------------------


def test_shares_base_dimensions(shares_base):
    ds = shares_base
    assert (ds.n, ds.T, ds.p) == (500, 2, 40)
    assert np.unique(ds.obs_cluster).size == 48
    assert len({c[:2] for c in ds.sector_code}) == 20
    assert np.all(ds.s_z.sum(axis=2) <= 1.0)


def test_shocks_base_dimensions(shocks_base):
    ds = shocks_base
    assert (ds.n, ds.T, ds.p) == (300, 2, 100)
    assert np.unique(ds.sector_cluster).size == 50


# --- shares design -------------------------------------------------------


def test_moulton_single_cluster_closed_form():
    e = np.array([0.7, -1.3])
    q = np.array([0.2, 0.5])
    a_eta, s_eta, a_zeta, s_zeta = moulton_fit(e, q, ["c", "c"])
    Q = q.sum()
    # one equation in two unknowns: minimum-norm solution
    np.testing.assert_allclose([a_eta, s_eta], e[0] * e[1] * np.array([1.0, Q]) / (1 + Q**2), rtol=1e-12)
    sig = a_eta + s_eta * Q
    lhs = np.array([[1.0, q[0]], [1.0, q[1]]])
    ref = np.linalg.solve(lhs, e**2 - max(sig, 0.0))
    np.testing.assert_allclose([a_zeta, s_zeta], ref, rtol=1e-10)


def test_moulton_needs_a_pair():
    with pytest.raises(DataError, match="two observations"):
        moulton_fit([1.0, 2.0], [0.1, 0.2], ["a", "b"])


def test_homoskedastic_errors_give_zero_slopes(shares_base):
    dgp = SharesDgp(0.3, 0.0, 1.0, 0.0, 0.5, np.array([0.1, -0.2, 0.3]), shares_base, seed=5)
    ds = simulate_shares_dgp(dgp, 0)
    e = structural_error(dgp, ds).reshape(-1)
    sq = np.einsum("itp,itp->it", ds.s_z, ds.s_z).reshape(-1)
    lab = ds.obs_cluster.reshape(-1).astype(str)
    a_eta, s_eta, a_zeta, s_zeta = moulton_fit(e, sq, lab)

    groups = sorted(set(lab))
    n_c = np.array([np.sum(lab == g) for g in groups], dtype=float)
    Qc = np.array([sq[lab == g].sum() for g in groups])
    cross = np.array([(e[lab == g].sum() ** 2 - (e[lab == g] ** 2).sum()) for g in groups])
    ok = n_c > 1
    sw = np.sqrt(n_c[ok] * (n_c[ok] - 1))
    coef, se = hc0_se(np.column_stack([sw, sw * Qc[ok]]), cross[ok] / sw)
    assert coef == pytest.approx([a_eta, s_eta], rel=1e-8)
    assert abs(s_eta) < 3 * se[1]
    sig = np.maximum(a_eta + s_eta * Qc, 0.0)[np.searchsorted(groups, lab)]
    coef, se = hc0_se(np.column_stack([np.ones_like(sq), sq]), e**2 - sig)
    assert coef == pytest.approx([a_zeta, s_zeta], rel=1e-8)
    assert abs(s_zeta) < 3 * se[1]


def test_moulton_within_cluster_correlation(shares_base):
    a_eta, a_zeta = 0.5, 1.0
    dgp = SharesDgp(a_eta, 0.0, a_zeta, 0.0, 0.5, np.zeros(3), shares_base, seed=1)
    lab = shares_base.obs_cluster.reshape(-1).astype(str)
    _, inv = np.unique(lab, return_inverse=True)
    n_c = np.bincount(inv).astype(float)
    cross, sq = [], []
    for r in range(2000):
        e = structural_error(dgp, simulate_shares_dgp(dgp, r)).reshape(-1)
        s1 = np.bincount(inv, weights=e)
        s2 = np.bincount(inv, weights=e**2)
        cross.append(np.sum(s1**2 - s2) / np.sum(n_c * (n_c - 1)))
        sq.append(np.mean(e**2))
    cross, sq = np.array(cross), np.array(sq)
    rho = cross.mean() / sq.mean()
    se = cross.std() / math.sqrt(cross.size) / sq.mean()
    assert abs(rho - a_eta / (a_eta + a_zeta)) < 3 * se


def test_no_cluster_component_means_no_correlation(shares_base):
    dgp = SharesDgp(0.0, 0.0, 1.0, 0.0, 0.5, np.zeros(3), shares_base, seed=2)
    lab = shares_base.obs_cluster.reshape(-1).astype(str)
    _, inv = np.unique(lab, return_inverse=True)
    n_c = np.bincount(inv).astype(float)
    cross = []
    for r in range(500):
        e = structural_error(dgp, simulate_shares_dgp(dgp, r)).reshape(-1)
        s1 = np.bincount(inv, weights=e)
        s2 = np.bincount(inv, weights=e**2)
        cross.append(np.sum(s1**2 - s2) / np.sum(n_c * (n_c - 1)))
    cross = np.array(cross)
    assert abs(cross.mean()) < 3 * cross.std() / math.sqrt(cross.size)


def test_negative_variances_floored(shares_base):
    dgp = SharesDgp(-1.0, 0.0, -2.0, 0.0, 0.5, np.zeros(3), shares_base)
    assert np.all(structural_error(dgp, simulate_shares_dgp(dgp, 3)) == 0.0)


def test_shares_simulation_holds_fixed_parts(shares_base):
    dgp = fit_shares_dgp(shares_base, seed=4)
    a = simulate_shares_dgp(dgp, 7)
    b = simulate_shares_dgp(dgp, 7)
    c = simulate_shares_dgp(dgp, 8)
    for name in ("y", "x", "s_z", "s_x"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert not np.array_equal(a.y, c.y)
    for name in ("w", "shock_z", "shock_x", "reg_weight"):
        assert np.array_equal(getattr(a, name), getattr(shares_base, name))
    # every resampled row is some base unit's row of the same period
    base_rows = {tuple(r) for r in shares_base.s_z[:, 1, :]}
    assert all(tuple(r) in base_rows for r in a.s_z[:, 1, :])
    np.testing.assert_allclose(a.x, np.einsum("itp,tp->it", a.s_x, shares_base.shock_x), rtol=1e-14)


# --- shocks design -------------------------------------------------------


def shock_panel(rng, n=300, T=4, p=200, Gamma=0.8, noise=0.5, exact_x=False):
    codes = [f"{100 + k // 2}{k % 2}" for k in range(p)]
    s = rng.dirichlet(np.full(p, 2.0), size=(n, T)) * 0.6
    char = rng.standard_normal((T, p))
    c1 = np.einsum("itp,tp->it", s, char) + 0.05 * rng.standard_normal((n, T))
    w = np.stack([np.ones((n, T)), c1], axis=2)
    Zw = np.stack([np.linalg.solve(s[:, t].T @ s[:, t] + 0.1 * np.eye(p), s[:, t].T @ c1[:, t])
                   for t in range(T)])
    shock_z = Gamma * Zw + noise * rng.standard_normal((T, p))
    shock_x = 0.3 + 0.7 * shock_z + (0.0 if exact_x else 0.2 * rng.standard_normal((T, p)))
    x = np.einsum("itp,tp->it", s, shock_x)
    y = x + rng.standard_normal((n, T))
    return PanelDataset(
        y=y, x=x, w=w, s_z=s, shock_z=shock_z, reg_weight=np.ones((n, T)),
        obs_cluster=np.repeat(np.array([f"g{i % 20}" for i in range(n)], dtype=object)[:, None], T, axis=1),
        sector_code=np.array(codes, dtype=object),
        sector_cluster=np.array([c[:3] for c in codes], dtype=object),
        s_x=s, shock_x=shock_x, control_names=("intercept", "c1"),
    ), Zw


def test_gamma_recovered():
    rng = np.random.default_rng(31)
    ds, Zw = shock_panel(rng)
    dgp = fit_shocks_dgp(ds)
    assert dgp.transformed == (1,)
    np.testing.assert_allclose(dgp.Zw[:, :, 0], Zw, rtol=1e-8, atol=1e-10)
    se = 0.5 / math.sqrt(np.sum(Zw**2))
    assert abs(dgp.Gamma[0] - 0.8) < 3 * se


def test_exact_first_stage_shock_fit():
    ds, _ = shock_panel(np.random.default_rng(32), n=100, T=2, p=20, exact_x=True)
    dgp = fit_shocks_dgp(ds)
    assert dgp.sigma_xi == pytest.approx(0.0, abs=1e-12)
    assert dgp.alpha == pytest.approx(0.3) and dgp.kappa == pytest.approx(0.7)


def test_common_shock_variance_unbiased():
    rng = np.random.default_rng(33)
    labels = np.repeat([f"c{k}" for k in range(50)], 2)
    sig_eta, sig_zeta = 0.6, 1.0
    est = []
    for _ in range(400):
        V = rng.standard_normal(50)
        nu = np.repeat(V, 2)[None, :] * sig_eta + sig_zeta * rng.standard_normal((2, 100))
        est.append(common_shock_variances(nu, labels)[0])
    est = np.array(est)
    assert abs(est.mean() - sig_eta**2) < 3 * est.std() / math.sqrt(est.size)
    with pytest.raises(DataError):
        common_shock_variances(np.ones((1, 3)), ["a", "b", "c"])


def test_shocks_simulation_determinism(shocks_base):
    dgp = fit_shocks_dgp(shocks_base, seed=9)
    a, b, c = (simulate_shocks_dgp(dgp, r) for r in (3, 3, 4))
    for name in ("y", "x", "shock_z", "shock_x"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert not np.array_equal(a.shock_z, c.shock_z)
    assert np.array_equal(a.s_z, shocks_base.s_z)
    np.testing.assert_array_equal(a.w, dgp.W_hat)


def test_shocks_zero_noise_limit(shocks_base):
    from dataclasses import replace
    dgp = replace(fit_shocks_dgp(shocks_base), sigma_eta=0.0, sigma_zeta=0.0)
    a, b = simulate_shocks_dgp(dgp, 0), simulate_shocks_dgp(dgp, 1)
    np.testing.assert_array_equal(a.shock_z, dgp.shock_mean)
    np.testing.assert_array_equal(a.shock_z, b.shock_z)


def test_fitted_shock_mean_lies_in_control_span(shocks_base):
    dgp = fit_shocks_dgp(shocks_base)
    # with shocks at their fitted mean the instrument is a combination of the
    # transformed controls, so its residual on W_hat vanishes
    Z = np.einsum("itp,tp->it", shocks_base.s_z, dgp.shock_mean)
    W = dgp.W_hat.reshape(-1, shocks_base.d)
    coef, *_ = np.linalg.lstsq(W, Z.reshape(-1), rcond=None)
    assert np.max(np.abs(Z.reshape(-1) - W @ coef)) < 1e-8 * np.max(np.abs(Z))


# --- null validity and studies ------------------------------------------


@pytest.mark.slow
def test_shares_null_moments_centered(shares_base):
    dgp = fit_shares_dgp(shares_base, seed=11)
    R = 1000
    cfg = BootstrapConfig(B=1)
    vals = []
    for r in range(R):
        res = run_shares_test(simulate_shares_dgp(dgp, r), 2, "pooled", cfg)
        vals.append([v / math.sqrt(res.details["b_eff"]) for _, v in res.per_moment])
    vals = np.array(vals)
    assert vals.shape == (R, 20)
    assert np.all(np.abs(vals.mean(axis=0)) < 4 / math.sqrt(R))


@pytest.mark.slow
def test_shocks_null_moments_centered(shocks_base):
    dgp = fit_shocks_dgp(shocks_base, seed=12)
    R = 1000
    cfg = BootstrapConfig(B=1)
    vals = []
    for r in range(R):
        res = run_shocks_test(simulate_shocks_dgp(dgp, r), lam=1e-6, config=cfg)
        vals.append([v / math.sqrt(res.details["b_eff"]) for _, v in res.per_moment])
    vals = np.array(vals)
    assert vals.shape == (R, 20)
    assert np.all(np.abs(vals.mean(axis=0)) < 4 / math.sqrt(R))


def test_study_is_deterministic(shares_base, shocks_base):
    sd = fit_shares_dgp(shares_base, seed=3)
    rows = [{"sic_level": 2, "period_selection": "pooled"}]
    a = rejection_study(sd, "shares", rows, R=6, seed=5, B=50)
    b = rejection_study(sd, "shares", rows, R=6, seed=5, B=50, threads=2)
    assert a.to_text() == b.to_text()
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
    row = a.to_dict()["rows"][0]
    assert row["n_moments"] == 20 and set(row["rejection_rate"]) == {"0.01", "0.05", "0.1"}
    kd = fit_shocks_dgp(shocks_base, seed=3)
    c = rejection_study(kd, "shocks", [{"lambda": 1e-5}], R=3, seed=5, B=50)
    d = rejection_study(kd, "shocks", [{"lambda": 1e-5}], R=3, seed=5, B=50, threads=3)
    assert c.to_text() == d.to_text()
    assert "lambda = 1e-05" in c.to_text()


def test_study_validation(shares_base):
    dgp = fit_shares_dgp(shares_base)
    with pytest.raises(DataError):
        rejection_study(dgp, "power", R=2)
    with pytest.raises(DataError):
        rejection_study(dgp, "shares", R=0)
