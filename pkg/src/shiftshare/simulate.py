"""Monte Carlo designs for the two overidentification tests.

Two data-generating processes are fitted to a base dataset and then
simulated under the null of the corresponding test:

* :class:`SharesDgp` keeps controls, shocks, weights and clusters fixed,
  resamples shares and draws heteroskedastic group-shock errors.
* :class:`ShocksDgp` keeps shares fixed, replaces the controls by share
  projections of period-level control shocks and redraws the shocks around
  their fitted conditional mean.

:func:`rejection_study` runs either test on many simulated samples.  When no
base dataset is supplied, :func:`synthetic_shares_base` and
:func:`synthetic_shocks_base` provide built-in stand-ins.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .bootstrap import TAG_SIMULATION, BootstrapConfig, substream
from .data import PanelDataset, Schema, stack_panel, write_csv
from .errors import DataError
from .overid_shares import run_shares_test
from .overid_shocks import MomentFunctionSet, logit_moment_set, run_shocks_test
from .tsls import TslsFit, fit_tsls

TAG_STUDY_SEED = 2
LEVELS = (0.01, 0.05, 0.10)
DEFAULT_FIT_LAMBDA = 0.1

SHARES_TABLE_ROWS = (
    {"sic_level": 4, "period_selection": "all"},
    {"sic_level": 4, "period_selection": "pooled"},
    {"sic_level": 3, "period_selection": "all"},
    {"sic_level": 3, "period_selection": "pooled"},
    {"sic_level": 2, "period_selection": "all"},
    {"sic_level": 2, "period_selection": "pooled"},
)
SHOCKS_TABLE_ROWS = tuple({"lambda": lam} for lam in (1e-3, 1e-4, 1e-5, 1e-6))


# ---------------------------------------------------------------------------
# Built-in synthetic bases
# ---------------------------------------------------------------------------


def _dirichlet_shares(rng, n, p, alpha, mass_low, mass_high):
    comp = rng.dirichlet(np.full(p, alpha), size=n)
    mass = rng.uniform(mass_low, mass_high, size=n)
    return np.round(comp * mass[:, None], 6)


def _drift_shares(rng, s, alpha, keep):
    """Mix shares with fresh draws keeping each unit's total mass."""
    n, p = s.shape
    mass = s.sum(axis=1, keepdims=True)
    fresh = rng.dirichlet(np.full(p, alpha), size=n) * mass
    return np.round(keep * s + (1.0 - keep) * fresh, 6)


def synthetic_shares_base(seed: int = 20240611, n: int = 500, n_clusters: int = 48,
                          concentration: float = 0.1, size_concentration: float = 0.5,
                          pop_log_sd: float = 1.2, eta_var: float = 0.3) -> PanelDataset:
    """Base for the shares design: n=500, T=2, p=40, 48 clusters.

    Sector codes are four digits in 20 two-digit groups with two sectors each
    (distinct three-digit prefixes).  The layout mimics a commuting-zone panel:
    cluster sizes are uneven (every cluster non-empty, the rest allocated with
    Dirichlet(``size_concentration``) probabilities), population weights are
    log-normal with log-sd ``pop_log_sd`` and fixed over time, and each unit
    is exposed to few sectors (Dirichlet(``concentration``) composition on a
    total mass uniform in [0.1, 0.5]).  Controls are an intercept, a period-2
    dummy and one covariate; errors are a cluster shock with variance
    ``eta_var`` plus unit noise with variance 1.
    """
    rng = np.random.default_rng(seed)
    T = 2
    codes = [f"{g}{k}0" for g in range(20, 40) for k in (1, 2)]
    p = len(codes)
    probs = rng.dirichlet(np.full(n_clusters, size_concentration))
    lab = np.concatenate([np.arange(n_clusters), rng.choice(n_clusters, size=n - n_clusters, p=probs)])
    state = np.array([f"st{c:02d}" for c in lab], dtype=object)

    s1 = _dirichlet_shares(rng, n, p, concentration, 0.1, 0.5)
    s_z = np.stack([s1, _drift_shares(rng, s1, concentration, 0.8)], axis=1)
    s_x = np.stack([_drift_shares(rng, s_z[:, t], concentration, 0.7) for t in range(T)], axis=1)
    shock_z = rng.standard_normal((T, p))
    shock_x = 0.8 * shock_z + 0.6 * rng.standard_normal((T, p))

    c1 = rng.standard_normal((n, T))
    w = np.stack([np.ones((n, T)), np.tile([0.0, 1.0], (n, 1)), c1], axis=2)
    pop = np.repeat(rng.lognormal(0.0, pop_log_sd, size=(n, 1)), T, axis=1)
    x = np.einsum("itp,tp->it", s_x, shock_x)
    eta = rng.normal(0.0, math.sqrt(eta_var), size=n_clusters)[lab]
    y = 0.5 * x + w @ np.array([0.1, -0.2, 0.3]) + eta[:, None] + rng.standard_normal((n, T))
    return PanelDataset(
        y=y, x=x, w=w, s_z=s_z, shock_z=shock_z, reg_weight=pop,
        obs_cluster=np.repeat(state[:, None], T, axis=1),
        sector_code=np.array(codes, dtype=object),
        sector_cluster=np.array([c[:3] for c in codes], dtype=object),
        s_x=s_x, shock_x=shock_x,
        control_names=("intercept", "period2", "c1"),
        unit_ids=tuple(f"u{i:03d}" for i in range(n)), periods=("1", "2"),
    )


def synthetic_shocks_base(seed: int = 20240612) -> PanelDataset:
    """Base for the shocks design: n=300, T=2, p=100 in 50 three-digit clusters.

    Shares are dense so each period's share Gram matrix is nonsingular.  The
    covariate ``c1`` is a share-weighted sector characteristic plus noise.
    """
    rng = np.random.default_rng(seed)
    n, T = 300, 2
    codes = [f"{200 + k}{m}" for k in range(50) for m in (1, 2)]
    p = len(codes)
    s1 = _dirichlet_shares(rng, n, p, 2.0, 0.3, 0.7)
    s_z = np.stack([s1, _drift_shares(rng, s1, 2.0, 0.8)], axis=1)
    s_x = np.stack([_drift_shares(rng, s_z[:, t], 2.0, 0.7) for t in range(T)], axis=1)
    shock_z = rng.standard_normal((T, p))
    shock_x = 0.8 * shock_z + 0.6 * rng.standard_normal((T, p))
    char = rng.standard_normal(p)
    c1 = np.einsum("itp,p->it", s_z, char) + 0.1 * rng.standard_normal((n, T))
    w = np.stack([np.ones((n, T)), np.tile([0.0, 1.0], (n, 1)), c1], axis=2)
    pop = rng.lognormal(0.0, 0.5, size=(n, T))
    x = np.einsum("itp,tp->it", s_x, shock_x)
    y = 0.5 * x + w @ np.array([0.1, -0.2, 0.3]) + rng.standard_normal((n, T))
    region = np.array([f"r{k:02d}" for k in rng.integers(0, 30, size=n)], dtype=object)
    return PanelDataset(
        y=y, x=x, w=w, s_z=s_z, shock_z=shock_z, reg_weight=pop,
        obs_cluster=np.repeat(region[:, None], T, axis=1),
        sector_code=np.array(codes, dtype=object),
        sector_cluster=np.array([c[:3] for c in codes], dtype=object),
        s_x=s_x, shock_x=shock_x,
        control_names=("intercept", "period2", "c1"),
        unit_ids=tuple(f"u{i:03d}" for i in range(n)), periods=("1", "2"),
    )


BASE_SCHEMA = Schema(
    outcome="y", regressor="x", weight="pop", cluster="cluster",
    controls=("period2", "c1"), add_intercept=True,
    share_prefix="s_", regressor_share_prefix="sx_",
    regressor_shock_value="shock_x",
)


def export_base(kind: str, directory) -> dict[str, Path]:
    """Write a built-in base as ``obs.csv``, ``shocks.csv`` and ``config.json``."""
    if kind not in ("shares", "shocks"):
        raise DataError(f"unknown base {kind!r}")
    ds = synthetic_shares_base() if kind == "shares" else synthetic_shocks_base()
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"data": out / "obs.csv", "shocks": out / "shocks.csv", "config": out / "config.json"}
    write_csv(ds, paths["data"], paths["shocks"], BASE_SCHEMA)
    paths["config"].write_text(json.dumps(BASE_SCHEMA.to_dict(), indent=2) + "\n", encoding="utf-8")
    return paths


# ---------------------------------------------------------------------------
# Shares design
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SharesDgp:
    """Group-shock error model with share-dependent variances.

    ``E[eta_c^2] = a_eta + s_eta * sum_{(i,t) in c} S'S`` and
    ``E[zeta_it^2] = a_zeta + s_zeta * S_it'S_it``.
    """

    a_eta: float
    s_eta: float
    a_zeta: float
    s_zeta: float
    beta_hat: float
    gamma_hat: np.ndarray
    base: PanelDataset = field(repr=False)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"a_eta": self.a_eta, "s_eta": self.s_eta, "a_zeta": self.a_zeta,
                "s_zeta": self.s_zeta, "beta_hat": self.beta_hat,
                "gamma_hat": np.asarray(self.gamma_hat).tolist(), "seed": self.seed}


def _cluster_index(labels):
    groups, inverse = np.unique(np.asarray(labels).astype(str), return_inverse=True)
    return groups, inverse


def moulton_fit(eps, sq_norm, cluster):
    """Least-squares fit of the group-shock variance model.

    Parameters
    ----------
    eps : array (N,)
        Residuals.
    sq_norm : array (N,)
        ``S'S`` per observation.
    cluster : labels (N,)

    Returns
    -------
    (a_eta, s_eta, a_zeta, s_zeta)
    """
    eps = np.asarray(eps, dtype=float)
    sq_norm = np.asarray(sq_norm, dtype=float)
    _, inv = _cluster_index(cluster)
    k = inv.max() + 1
    n_c = np.bincount(inv, minlength=k).astype(float)
    Q = np.bincount(inv, weights=sq_norm, minlength=k)
    s1 = np.bincount(inv, weights=eps, minlength=k)
    s2 = np.bincount(inv, weights=eps**2, minlength=k)
    pairs = n_c * (n_c - 1.0)
    has = pairs > 0
    if not has.any():
        raise DataError("no cluster contains two observations; the cluster variance is not identified")
    # all ordered pairs in a cluster share the regressor Q_c, so the pair
    # problem is a weighted regression of the mean cross-product on (1, Q_c)
    mean_cross = (s1[has] ** 2 - s2[has]) / pairs[has]
    sw = np.sqrt(pairs[has])
    A = np.column_stack([sw, sw * Q[has]])
    (a_eta, s_eta), *_ = linalg.lstsq(A, sw * mean_cross)
    sigma_eta2 = np.maximum(a_eta + s_eta * Q, 0.0)[inv]
    B = np.column_stack([np.ones_like(eps), sq_norm])
    (a_zeta, s_zeta), *_ = linalg.lstsq(B, eps**2 - sigma_eta2)
    return float(a_eta), float(s_eta), float(a_zeta), float(s_zeta)


def fit_shares_dgp(ds: PanelDataset, fit: TslsFit | None = None, seed: int = 0) -> SharesDgp:
    """Fit the variance model to the residuals of the weighted TSLS fit."""
    if ds.s_x is None:
        raise DataError("the shares design needs regressor shares and regressor shocks")
    design = stack_panel(ds)
    fit = fit_tsls(design, ds.control_names) if fit is None else fit
    sq = np.einsum("rp,rp->r", design.S, design.S)
    a_eta, s_eta, a_zeta, s_zeta = moulton_fit(fit.eps_hat, sq, design.obs_cluster)
    return SharesDgp(a_eta, s_eta, a_zeta, s_zeta, fit.beta, np.asarray(fit.gamma_s), ds, int(seed))


def simulate_shares_dgp(dgp: SharesDgp, replication: int) -> PanelDataset:
    """One sample: resampled shares, rebuilt Z and X, group-shock outcome.

    Shares are drawn with replacement independently in each period, the
    regressor and instrument shares of a unit travelling together.  Controls,
    shocks, weights and cluster labels stay at their base positions.
    """
    ds = dgp.base
    n, T = ds.n, ds.T
    rng = substream(dgp.seed, TAG_SIMULATION, replication)
    idx = np.stack([rng.integers(0, n, size=n) for _ in range(T)], axis=1)
    tt = np.broadcast_to(np.arange(T), (n, T))
    s_z = ds.s_z[idx, tt]
    s_x = ds.s_x[idx, tt]
    x = np.einsum("itp,tp->it", s_x, ds.shock_x)

    groups, inv = _cluster_index(ds.obs_cluster.reshape(-1))
    sq = np.einsum("itp,itp->it", s_z, s_z).reshape(-1)
    Q = np.bincount(inv, weights=sq, minlength=groups.size)
    sig_eta = np.sqrt(np.maximum(dgp.a_eta + dgp.s_eta * Q, 0.0))
    sig_zeta = np.sqrt(np.maximum(dgp.a_zeta + dgp.s_zeta * sq, 0.0))
    V = rng.standard_normal(groups.size)
    U = rng.standard_normal(n * T)
    err = (V[inv] * sig_eta[inv] + U * sig_zeta).reshape(n, T)
    y = dgp.beta_hat * x + ds.w @ dgp.gamma_hat + err
    return ds.with_arrays(y=y, x=x, s_z=s_z, s_x=s_x, s_moment=None, moment_code=None,
                          moment_cluster=None, meta={"replication": int(replication)})


# ---------------------------------------------------------------------------
# Shocks design
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ShocksDgp:
    """Shock model ``E[shock_z | G] = Zw_t Gamma`` with clustered noise.

    ``Zw`` (T x p x d_v) holds the ridge coefficients of the share-varying
    controls on the shares; controls that are constant within every period
    (intercept, period dummies) are kept as they are.
    """

    Zw: np.ndarray
    transformed: tuple[int, ...]
    Gamma: np.ndarray
    sigma_eta: float
    sigma_zeta: float
    alpha: float
    kappa: float
    sigma_xi: float
    beta_hat: float
    gamma_hat: np.ndarray
    e_hat: np.ndarray
    W_hat: np.ndarray
    base: PanelDataset = field(repr=False)
    lambda_fit: float = DEFAULT_FIT_LAMBDA
    beta_unit: np.ndarray | None = None
    seed: int = 0

    @property
    def shock_mean(self) -> np.ndarray:
        """Fitted conditional mean of the instrument shocks, ``T x p``."""
        if self.Gamma.size == 0:
            return np.zeros(self.base.shock_z.shape)
        return np.einsum("tpk,k->tp", self.Zw, self.Gamma)

    def to_dict(self) -> dict:
        return {"Gamma": self.Gamma.tolist(), "sigma_eta": self.sigma_eta,
                "sigma_zeta": self.sigma_zeta, "alpha": self.alpha, "kappa": self.kappa,
                "sigma_xi": self.sigma_xi, "beta_hat": self.beta_hat,
                "gamma_hat": np.asarray(self.gamma_hat).tolist(), "lambda_fit": self.lambda_fit,
                "transformed_controls": [self.base.control_names[k] for k in self.transformed],
                "seed": self.seed}


def common_shock_variances(nu, sector_cluster):
    """Cluster and idiosyncratic variances of ``nu`` (T x p), pooling periods.

    Returns ``(sigma_eta2, sigma_zeta2)`` before flooring.  The cluster
    variance averages over clusters that contain at least two entries.
    """
    nu = np.asarray(nu, dtype=float)
    T, p = nu.shape
    labels = np.tile(np.asarray(sector_cluster).astype(str), T)
    _, inv = _cluster_index(labels)
    k = inv.max() + 1
    v = nu.reshape(-1)
    n_c = np.bincount(inv, minlength=k).astype(float)
    s1 = np.bincount(inv, weights=v, minlength=k)
    s2 = np.bincount(inv, weights=v**2, minlength=k)
    has = n_c > 1
    if not has.any():
        raise DataError("no sector cluster has two entries; the common shock variance is not identified")
    eta2 = float(np.mean((s1[has] ** 2 - s2[has]) / (n_c[has] * (n_c[has] - 1.0))))
    zeta2 = float(np.mean(s2 / n_c)) - eta2
    return eta2, zeta2


def fit_shocks_dgp(ds: PanelDataset, lambda_fit: float = DEFAULT_FIT_LAMBDA, seed: int = 0,
                   beta_unit=None) -> ShocksDgp:
    """Fit the shock model, the regressor-shock regression and the outcome refit."""
    if ds.shock_x is None:
        raise DataError("the shocks design needs regressor shares and regressor shocks")
    if lambda_fit < 0:
        raise DataError("ridge penalty must be non-negative")
    n, T, p, d = ds.n, ds.T, ds.p, ds.d
    transformed = tuple(k for k in range(d) if any(np.ptp(ds.w[:, t, k]) > 0 for t in range(T)))
    Zw = np.zeros((T, p, len(transformed)))
    for t in range(T):
        S = ds.s_z[:, t, :]
        gram = S.T @ S + lambda_fit * np.eye(p)
        Zw[t] = linalg.solve(gram, S.T @ ds.w[:, t, list(transformed)], assume_a="pos")
    if transformed:
        Gamma, *_ = linalg.lstsq(Zw.reshape(T * p, -1), ds.shock_z.reshape(-1))
    else:
        Gamma = np.zeros(0)
    mean = np.einsum("tpk,k->tp", Zw, Gamma) if transformed else np.zeros((T, p))
    eta2, zeta2 = common_shock_variances(ds.shock_z - mean, ds.sector_cluster)

    zz = ds.shock_z.reshape(-1)
    (alpha, kappa), *_ = linalg.lstsq(np.column_stack([np.ones_like(zz), zz]), ds.shock_x.reshape(-1))
    xi = ds.shock_x.reshape(-1) - alpha - kappa * zz
    sigma_xi = float(np.sqrt(np.var(xi)))

    W_hat = np.array(ds.w, copy=True)
    for pos, k in enumerate(transformed):
        W_hat[:, :, k] = np.einsum("itp,tp->it", ds.s_z, Zw[:, :, pos])
    base = ds.with_arrays(w=W_hat)
    fit = fit_tsls(stack_panel(base), base.control_names)
    if beta_unit is not None:
        beta_unit = np.asarray(beta_unit, dtype=float)
        if beta_unit.shape != (n,):
            raise DataError("beta_unit needs one effect per unit")
    return ShocksDgp(
        Zw=Zw, transformed=transformed, Gamma=np.asarray(Gamma), sigma_eta=math.sqrt(max(eta2, 0.0)),
        sigma_zeta=math.sqrt(max(zeta2, 0.0)), alpha=float(alpha), kappa=float(kappa),
        sigma_xi=sigma_xi, beta_hat=fit.beta, gamma_hat=np.asarray(fit.gamma_s),
        e_hat=fit.eps_hat.reshape(n, T), W_hat=W_hat, base=base, lambda_fit=float(lambda_fit),
        beta_unit=beta_unit, seed=int(seed),
    )


def simulate_shocks_dgp(dgp: ShocksDgp, replication: int) -> PanelDataset:
    """One sample with redrawn instrument and regressor shocks.

    The cluster draw ``V_c`` of a three-digit sector group is shared by all
    its sectors in all periods.
    """
    ds = dgp.base
    T, p = ds.T, ds.p
    rng = substream(dgp.seed, TAG_SIMULATION, replication)
    groups, inv = _cluster_index(ds.sector_cluster)
    V = rng.standard_normal(groups.size)
    U_z = rng.standard_normal((T, p))
    U_x = rng.standard_normal((T, p))
    shock_z = dgp.shock_mean + V[inv][None, :] * dgp.sigma_eta + U_z * dgp.sigma_zeta
    shock_x = dgp.alpha + dgp.kappa * shock_z + U_x * dgp.sigma_xi
    x = np.einsum("itp,tp->it", ds.s_x, shock_x)
    effect = dgp.beta_hat if dgp.beta_unit is None else dgp.beta_unit[:, None]
    y = effect * x + dgp.W_hat @ dgp.gamma_hat + dgp.e_hat
    return ds.with_arrays(y=y, x=x, shock_z=shock_z, shock_x=shock_x,
                          meta={"replication": int(replication)})


# ---------------------------------------------------------------------------
# Rejection studies
# ---------------------------------------------------------------------------


def replication_seed(seed: int, replication: int) -> int:
    """Bootstrap seed of one replication, derived from the study seed."""
    ss = np.random.SeedSequence(int(seed) % 2**64, spawn_key=(TAG_STUDY_SEED, int(replication)))
    return int(ss.generate_state(1, np.uint64)[0])


def _row_label(test: str, row: dict) -> str:
    if test == "shares":
        sel = row.get("period_selection", "all")
        tail = "time aggregated" if sel == "pooled" else ("all periods" if sel == "all" else f"period {sel}")
        level = row.get("sic_level")
        head = f"SIC{level}" if level else "native codes"
        return f"{head} & {tail}"
    return f"lambda = {row['lambda']:g}"


@dataclass
class StudyRow:
    label: str
    config: dict
    n_moments: int
    rejections: dict
    raw_mean: list | None = None
    R: int = 0

    def rate(self, level: float) -> float:
        return self.rejections[level] / self.R if self.R else float("nan")


@dataclass
class StudyTable:
    """Rejection frequencies of one test over ``R`` simulated samples."""

    test: str
    R: int
    seed: int
    bootstrap: dict
    rows: list[StudyRow]
    dgp: dict
    elapsed_seconds: float = 0.0

    def to_dict(self) -> dict:
        out_rows = []
        for row in self.rows:
            rates = {f"{lv:g}": row.rate(lv) for lv in LEVELS}
            ses = {f"{lv:g}": math.sqrt(row.rate(lv) * (1 - row.rate(lv)) / self.R) for lv in LEVELS}
            out_rows.append({"label": row.label, "config": row.config, "n_moments": row.n_moments,
                             "rejection_rate": rates, "mc_se": ses,
                             "mean_standardized_stat": row.raw_mean})
        return {"test": self.test, "replications": self.R, "seed": self.seed,
                "bootstrap": self.bootstrap, "dgp": self.dgp, "rows": out_rows}

    def to_text(self) -> str:
        head = ["Moment restrictions" if self.test == "shares" else "Ridge parameter",
                "# Moments", "1%", "5%", "10%", "s.e.(5%)"]
        body = []
        for row in self.rows:
            r5 = row.rate(0.05)
            body.append([row.label, str(row.n_moments)]
                        + [f"{row.rate(lv):.3f}" for lv in LEVELS]
                        + [f"{math.sqrt(r5 * (1 - r5) / self.R):.3f}"])
        widths = [max(len(r[k]) for r in [head] + body) for k in range(len(head))]
        fmt = lambda r: "  ".join(c.ljust(widths[0]) if k == 0 else c.rjust(widths[k]) for k, c in enumerate(r))
        rule = "-" * len(fmt(head))
        return "\n".join([f"Rejection probabilities, {self.test} test, R = {self.R}", rule, fmt(head), rule]
                         + [fmt(r) for r in body] + [rule]) + "\n"


def _one_replication(dgp, test, rows, r, seed, boot, moments):
    if test == "shares":
        ds = simulate_shares_dgp(dgp, r)
    else:
        ds = simulate_shocks_dgp(dgp, r)
    cfg = BootstrapConfig(B=boot["B"], scheme=boot["scheme"], alpha=0.05,
                          seed=replication_seed(seed, r), threads=1)
    out = []
    for row in rows:
        if test == "shares":
            res = run_shares_test(ds, row.get("sic_level"), row.get("period_selection", "all"), cfg,
                                  bool(row.get("refit_per_period", False)))
        else:
            res = run_shocks_test(ds, moments, row.get("e_method", "ridge"), row["lambda"], config=cfg)
        b_eff = res.details.get("b_eff") or 1
        std = [v / math.sqrt(b_eff) for _, v in res.per_moment]
        out.append(([res.reject_at(lv) for lv in LEVELS], res.details["q"], std))
    return out


def rejection_study(dgp, test: str, rows=None, R: int = 1000, seed: int = 0, B: int = 1000,
                    scheme: str = "gaussian", threads: int = 1, moments: MomentFunctionSet | None = None,
                    progress=None) -> StudyTable:
    """Rejection frequencies at 1%, 5% and 10% over ``R`` simulated samples.

    Each sample is drawn once and evaluated for every configuration row; the
    three levels share one set of bootstrap draws.  Results do not depend on
    ``threads``.

    Parameters
    ----------
    dgp : SharesDgp or ShocksDgp
    test : {"shares", "shocks"}
    rows : list of dict, optional
        Shares rows take ``sic_level`` and ``period_selection``; shocks rows
        take ``lambda`` (and optionally ``e_method``).  Defaults are SIC levels
        4, 3 and 2 with and without time aggregation, or penalties 1e-3 to 1e-6.
    R, seed, B, scheme
        Replications, study seed, bootstrap draws and multiplier scheme.
    threads : int
        Replications evaluated concurrently.
    moments : MomentFunctionSet, optional
        Shocks-test moments (default: the 20 logit moments).
    progress : callable, optional
        Called with the number of finished replications.
    """
    if test not in ("shares", "shocks"):
        raise DataError(f"unknown test {test!r}")
    if int(R) < 1:
        raise DataError("need at least one replication")
    rows = [dict(r) for r in (rows or (SHARES_TABLE_ROWS if test == "shares" else SHOCKS_TABLE_ROWS))]
    moments = moments or logit_moment_set()
    boot = BootstrapConfig(B=B, scheme=scheme).echo()
    start = time.perf_counter()

    def task(r):
        return _one_replication(dgp, test, rows, r, seed, boot, moments)

    results = []
    if threads <= 1:
        for r in range(R):
            results.append(task(r))
            if progress:
                progress(r + 1)
    else:
        with ThreadPoolExecutor(max_workers=int(threads)) as pool:
            for k, res in enumerate(pool.map(task, range(R))):
                results.append(res)
                if progress:
                    progress(k + 1)

    table_rows = []
    for j, row in enumerate(rows):
        counts = {lv: sum(int(results[r][j][0][k]) for r in range(R)) for k, lv in enumerate(LEVELS)}
        qs = [results[r][j][1] for r in range(R)]
        stds = [results[r][j][2] for r in range(R)]
        same = len({len(s) for s in stds}) == 1 and stds[0]
        raw_mean = np.mean(np.array(stds), axis=0).tolist() if same else None
        table_rows.append(StudyRow(_row_label(test, row), row, int(max(set(qs), key=qs.count)),
                                   counts, raw_mean, R=R))
    return StudyTable(test=test, R=int(R), seed=int(seed), bootstrap=boot, rows=table_rows,
                      dgp=dgp.to_dict(), elapsed_seconds=time.perf_counter() - start)
