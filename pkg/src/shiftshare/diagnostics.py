"""Diagnostics for a causal reading of TSLS under heterogeneous effects.

With unit-specific first stages the TSLS estimand is a weighted average of
unit effects whose weights are quadratic forms in the shocks (or shares).
The checks here look for the ingredients that can make some weights
negative: correlated shares, sign changes in the first stage across
re-weightings of the instrument, and negatively correlated shocks within a
cluster.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import PanelDataset, stack_panel
from .errors import DataError
from .tsls import residualize_on_controls

DEFAULT_CORR_THRESHOLD = 0.1
PSD_TOL = 1e-10


# ---------------------------------------------------------------------------
# Share correlations
# ---------------------------------------------------------------------------


def residual_share_corr(ds: PanelDataset) -> np.ndarray:
    """Weighted correlation matrix of the shares after partialling out ``W``.

    Columns with zero residual variance get ``nan`` correlations.
    """
    design = stack_panel(ds)
    w = design.weight
    _, R = residualize_on_controls(design.S, design.W, w, ds.control_names)
    R = R - (w @ R / w.sum())
    cov = R.T @ (w[:, None] * R)
    sd = np.sqrt(np.diag(cov))
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = cov / np.outer(sd, sd)
    corr[sd == 0, :] = np.nan
    corr[:, sd == 0] = np.nan
    return np.clip(corr, -1.0, 1.0)


def share_corr_check(ds: PanelDataset, threshold: float = DEFAULT_CORR_THRESHOLD, top: int = 10) -> dict:
    """Flag pairs of sectors whose residualized shares are strongly correlated.

    The flag is advisory.  Returns the largest absolute off-diagonal
    correlation, the number of pairs above ``threshold`` and the ``top``
    strongest pairs.
    """
    if ds.p < 2:
        raise DataError("share correlation check needs at least 2 sectors")
    corr = residual_share_corr(ds)
    iu = np.triu_indices(ds.p, k=1)
    vals = corr[iu]
    ok = np.isfinite(vals)
    absval = np.where(ok, np.abs(vals), -1.0)
    order = np.argsort(-absval, kind="stable")[: min(top, int(ok.sum()))]
    pairs = [
        {"sectors": [str(ds.sector_code[iu[0][k]]), str(ds.sector_code[iu[1][k]])],
         "corr": float(vals[k])}
        for k in order
    ]
    max_abs = float(absval.max()) if ok.any() else None
    n_above = int(np.sum(absval > threshold))
    return {
        "threshold": threshold,
        "max_abs_corr": max_abs,
        "n_pairs_above": n_above,
        "n_pairs": int(vals.size),
        "n_undefined_pairs": int((~ok).sum()),
        "top_pairs": pairs,
        "flag": n_above > 0,
    }


# ---------------------------------------------------------------------------
# Sign diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transform:
    """A strictly positive function of the controls.

    ``func(W)`` receives the stacked ``rows x d`` controls and returns either
    one value per row or a ``rows x p`` matrix (one value per sector).
    """

    name: str
    func: Callable[[np.ndarray], np.ndarray]

    def evaluate(self, W: np.ndarray, p: int) -> np.ndarray:
        vals = np.asarray(self.func(W), dtype=float)
        rows = W.shape[0]
        if vals.shape == (rows,):
            vals = np.repeat(vals[:, None], p, axis=1)
        if vals.shape != (rows, p):
            raise DataError(f"transform {self.name!r} returned shape {vals.shape}")
        if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
            raise DataError(f"transform {self.name!r} produced non-positive values")
        return vals


def builtin_transforms(ds: PanelDataset, control: str | None = None) -> list[Transform]:
    """Constant 1, exp of a standardized control and a positive affine map of it.

    ``control`` defaults to the first control that varies across rows; with
    no such control only the constant is returned.
    """
    out = [Transform("constant", lambda W: np.ones(W.shape[0]))]
    W = stack_panel(ds).W
    names = list(ds.control_names)
    if control is None:
        varying = [k for k in range(W.shape[1]) if np.ptp(W[:, k]) > 0]
        if not varying:
            return out
        k = varying[0]
    else:
        if control not in names:
            raise DataError(f"unknown control {control!r}")
        k = names.index(control)
        if np.ptp(W[:, k]) == 0:
            raise DataError(f"control {control!r} is constant")
    mu, sd = W[:, k].mean(), W[:, k].std()
    lo, span = W[:, k].min(), np.ptp(W[:, k])
    label = names[k]
    out.append(Transform(f"exp_std({label})", lambda V: np.exp((V[:, k] - mu) / sd)))
    out.append(Transform(f"affine({label})", lambda V: 1.0 + (V[:, k] - lo) / span))
    return out


def _sign_report(stats: list[tuple[str, float]]) -> dict:
    signs = [int(np.sign(v)) for _, v in stats]
    return {
        "transforms": [{"name": k, "covariance": v, "sign": s} for (k, v), s in zip(stats, signs)],
        "agree": len(set(signs)) <= 1,
    }


def sign_diagnostic_shares(ds: PanelDataset, transforms: list[Transform] | None = None) -> dict:
    """Compare the sign of ``sum w X S_dot'(f(W) * shock)`` across transforms.

    ``S_dot`` are the shares residualized on the controls.  If the first stage
    has the same sign for every unit these covariances agree in sign.
    """
    transforms = builtin_transforms(ds) if transforms is None else list(transforms)
    if not transforms:
        raise DataError("sign diagnostic needs at least one transform")
    design = stack_panel(ds)
    w = design.weight
    _, S_dot = residualize_on_controls(design.S, design.W, w, ds.control_names)
    shock = ds.shock_z[design.period_index]
    stats = []
    for tr in transforms:
        f = tr.evaluate(design.W, ds.p)
        stats.append((tr.name, float(np.sum(w * design.x * np.sum(S_dot * f * shock, axis=1)))))
    return _sign_report(stats)


def sign_diagnostic_shocks(ds: PanelDataset, e_hat, transforms: list[Transform] | None = None) -> dict:
    """Compare the sign of ``sum w X E_hat'(f(W) * S)`` across transforms.

    ``E_hat`` stands in for the shocks net of their conditional mean; each
    transform re-weights the shares entering the instrument.
    """
    transforms = builtin_transforms(ds) if transforms is None else list(transforms)
    if not transforms:
        raise DataError("sign diagnostic needs at least one transform")
    E = np.asarray(getattr(e_hat, "e_hat", e_hat), dtype=float)
    if E.shape != (ds.T, ds.p):
        raise DataError(f"shock residual has shape {E.shape}, expected ({ds.T}, {ds.p})")
    design = stack_panel(ds)
    w = design.weight
    E_rows = E[design.period_index]
    stats = []
    for tr in transforms:
        f = tr.evaluate(design.W, ds.p)
        stats.append((tr.name, float(np.sum(w * design.x * np.sum(f * design.S * E_rows, axis=1)))))
    return _sign_report(stats)


# ---------------------------------------------------------------------------
# Within-cluster shock covariances
# ---------------------------------------------------------------------------


def within_cluster_shock_cov(e_hat, sector_cluster, sector_code=None) -> dict:
    """Pairwise covariances over periods of shock residuals within clusters.

    Clusters with a single sector have no pairs and are listed as skipped.
    Negative covariances are flagged.
    """
    E = np.asarray(getattr(e_hat, "e_hat", e_hat), dtype=float)
    T, p = E.shape
    if T < 2:
        raise DataError("within-cluster covariances need at least 2 periods")
    labels = np.asarray(sector_cluster).astype(str)
    if labels.shape != (p,):
        raise DataError("sector_cluster needs one label per sector")
    codes = [str(c) for c in (sector_code if sector_code is not None else range(p))]
    clusters, skipped = [], []
    n_negative = 0
    for c in dict.fromkeys(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            skipped.append(c)
            continue
        cov = np.atleast_2d(np.cov(E[:, idx], rowvar=False))
        neg = []
        for a in range(idx.size):
            for b in range(a + 1, idx.size):
                if cov[a, b] < 0:
                    neg.append({"sectors": [codes[idx[a]], codes[idx[b]]], "cov": float(cov[a, b])})
        n_negative += len(neg)
        iu = np.triu_indices(idx.size, k=1)
        clusters.append({"cluster": c, "size": int(idx.size), "min_cov": float(cov[iu].min()),
                         "negative_pairs": neg, "flag": bool(neg)})
    return {
        "clusters": clusters,
        "skipped_singletons": skipped,
        "n_negative_pairs": n_negative,
        "flag": n_negative > 0,
    }


# ---------------------------------------------------------------------------
# Weights from known primitives
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PrimitiveSpec:
    """First-stage types and the variance matrix that drive the weights.

    Attributes
    ----------
    Lambda : array (n, p)
        Diagonal entries of each unit's ``Lambda_i``.
    var_matrix : array (p, p) or (n, p, p)
        ``Var{S | W}`` (shares regime) or ``Var{shock | G}`` (shocks regime).
    regime : {"shares", "shocks"}
    """

    Lambda: np.ndarray
    var_matrix: np.ndarray
    regime: str = "shares"

    def __post_init__(self):
        L = np.atleast_2d(np.asarray(self.Lambda, dtype=float))
        V = np.asarray(self.var_matrix, dtype=float)
        object.__setattr__(self, "Lambda", L)
        object.__setattr__(self, "var_matrix", V)
        if self.regime not in ("shares", "shocks"):
            raise DataError(f"regime must be 'shares' or 'shocks', got {self.regime!r}")
        n, p = L.shape
        Vs = V[None] if V.ndim == 2 else V
        if Vs.shape[1:] != (p, p) or Vs.shape[0] not in (1, n):
            raise DataError(f"var_matrix has shape {V.shape}, expected ({p}, {p}) or ({n}, {p}, {p})")
        for v in Vs:
            scale = max(np.abs(v).max(), 1.0)
            if np.abs(v - v.T).max() > PSD_TOL * scale:
                raise DataError("var_matrix must be symmetric")
            if np.linalg.eigvalsh(v)[0] < -PSD_TOL * scale:
                raise DataError("var_matrix must be positive semi-definite")

    @property
    def n(self) -> int:
        return self.Lambda.shape[0]

    @property
    def p(self) -> int:
        return self.Lambda.shape[1]


def weights_from_primitives(spec: PrimitiveSpec, realization) -> np.ndarray:
    """Weights ``omega_i = r_i' Lambda_i V r_i / sum_j r_j' Lambda_j V r_j``.

    ``realization`` is the shock vector (shares regime, ``p`` or ``n x p``) or
    the unit shares (shocks regime, ``n x p``).
    """
    r = np.asarray(realization, dtype=float)
    n, p = spec.n, spec.p
    if r.shape == (p,):
        r = np.broadcast_to(r, (n, p))
    if r.shape != (n, p):
        raise DataError(f"realization has shape {r.shape}, expected ({p},) or ({n}, {p})")
    V = spec.var_matrix
    Vr = r @ V if V.ndim == 2 else np.einsum("ijk,ik->ij", V, r)
    num = np.einsum("ij,ij,ij->i", r, spec.Lambda, Vr)
    den = num.sum()
    if den == 0.0 or abs(den) <= 1e-14 * np.abs(num).sum():
        raise DataError("weights are undefined: the quadratic forms sum to zero")
    return num / den


def negative_weight_search(spec: PrimitiveSpec, directions) -> dict:
    """Smallest weight over a set of realizations (one per row of ``directions``).

    Realizations with an undefined normalization are skipped.
    """
    best = {"min_weight": np.inf, "direction": None, "unit": None, "evaluated": 0}
    for d in np.asarray(directions, dtype=float):
        try:
            om = weights_from_primitives(spec, d)
        except DataError:
            continue
        best["evaluated"] += 1
        k = int(np.argmin(om))
        if om[k] < best["min_weight"]:
            best.update(min_weight=float(om[k]), direction=d.tolist(), unit=k)
    best["found_negative"] = best["min_weight"] < 0
    return best
