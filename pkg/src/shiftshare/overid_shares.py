"""Overidentification test when shares are the exogenous component.

Moments are ``sum_r w_r S_rj eps_r`` (one per sector, per period unless the
periods are pooled).  Influence contributions are clustered by the
observation clusters, so the effective sample size is the number of clusters.
"""

from __future__ import annotations

import time
import warnings

import numpy as np

from .bootstrap import BootstrapConfig, InfluenceMatrix, TestResult, degenerate_result, max_stat_test
from .data import PanelDataset, StackedDesign, aggregate_sic, stack_panel
from .errors import DataError, DegenerateMomentsError
from .tsls import TslsFit, fit_tsls

DEGENERATE_TOL = 1e-8
EXACT_FIT_TOL = 1e-10


def cluster_sums(values: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    """Sum the rows of ``values`` within each label; groups in sorted label order."""
    groups, inverse = np.unique(np.asarray(labels).astype(str), return_inverse=True)
    out = np.zeros((groups.size,) + values.shape[1:])
    np.add.at(out, inverse, values)
    return groups, out


def studentize(U_groups: np.ndarray, ref_groups: np.ndarray):
    """Standard deviation of group sums and the non-degenerate moment mask.

    ``ref_groups`` holds group sums of ``|w S eps|``; a moment whose standard
    deviation is below ``1e-8`` of that scale carries no information.
    """
    sigma = np.sqrt(np.mean((U_groups - U_groups.mean(axis=0)) ** 2, axis=0))
    ref = np.sqrt(np.mean(ref_groups**2, axis=0))
    keep = (ref > 0) & (sigma > DEGENERATE_TOL * ref)
    return sigma, keep


def influence_rows(design: StackedDesign, fit: TslsFit, moments: np.ndarray) -> np.ndarray:
    """Per-observation influence ``U_rj`` of the weighted moments.

    ``U_rj = w_r M_rj e_r - G_j H^{-1} w_r A_r e_r`` with ``A = (Z, W)``,
    ``R = (X, W)``, ``H = sum w A R'`` and ``G_j = sum w M_j R'``.
    """
    w, eps = design.weight, fit.eps_hat
    A = np.column_stack([design.Z, design.W])
    R = np.column_stack([design.x, design.W])
    H = A.T @ (w[:, None] * R)
    G = moments.T @ (w[:, None] * R)
    GH = np.linalg.solve(H.T, G.T).T
    we = w * eps
    return moments * we[:, None] - (A * we[:, None]) @ GH.T


def shares_influence(design: StackedDesign, fit: TslsFit, cluster=None, moments=None,
                     labels=None) -> InfluenceMatrix:
    """Clustered, studentized influence matrix for the share moments.

    Parameters
    ----------
    design, fit
        Stacked design and the TSLS fit on it.
    cluster : labels per row, optional
        Defaults to ``design.obs_cluster``.
    moments : array (rows, q), optional
        Moment shares; defaults to ``design.S_moment`` pooled over periods.
    labels : sequence of str, optional
        Moment labels.
    """
    cluster = design.obs_cluster if cluster is None else np.asarray(cluster)
    M = design.S_moment if moments is None else np.asarray(moments, dtype=float)
    labels = tuple(labels) if labels is not None else tuple(f"m{j}" for j in range(M.shape[1]))
    if M.shape[0] != design.rows or len(labels) != M.shape[1]:
        raise DataError("moment matrix must have one row per observation and one label per column")
    groups = np.unique(np.asarray(cluster).astype(str))
    if groups.size < 2:
        raise DataError(f"need at least 2 clusters, got {groups.size}")

    w, eps = design.weight, fit.eps_hat
    if np.sqrt(np.sum(w * eps**2)) <= EXACT_FIT_TOL * np.sqrt(np.sum(w * design.y**2)):
        raise DegenerateMomentsError("residuals are identically zero; all moments degenerate", labels)

    U = influence_rows(design, fit, M)
    _, U_c = cluster_sums(U, cluster)
    _, ref_c = cluster_sums(np.abs(M * (w * eps)[:, None]), cluster)
    sigma, keep = studentize(U_c, ref_c)
    dropped = tuple(l for l, k in zip(labels, keep) if not k)
    if not keep.any():
        raise DegenerateMomentsError("all moments have zero estimated variance", labels)
    if dropped:
        warnings.warn(f"dropped {len(dropped)} degenerate moment(s)", RuntimeWarning, stacklevel=2)
    raw = (M[:, keep] * (w * eps)[:, None]).sum(axis=0) / sigma[keep]
    return InfluenceMatrix(
        psi_hat=U_c[:, keep] / sigma[keep],
        sigma_hat=sigma[keep],
        raw_stats=raw,
        labels=tuple(l for l, k in zip(labels, keep) if k),
        dropped=dropped,
        group_labels=tuple(groups),
    )


def resolve_period(ds: PanelDataset, selection) -> int | str:
    """Normalize a period selection to ``"all"``, ``"pooled"`` or a period index."""
    if selection in ("all", "pooled"):
        return selection
    if isinstance(selection, (int, np.integer)) and not isinstance(selection, bool):
        if not 0 <= selection < ds.T:
            raise DataError(f"period index {selection} out of range for T={ds.T}")
        return int(selection)
    label = str(selection)
    if label in ds.periods:
        return ds.periods.index(label)
    raise DataError(f"unknown period selection {selection!r}; use 'all', 'pooled' or one of {list(ds.periods)}")


def moment_matrix(ds: PanelDataset, design: StackedDesign, selection):
    """Moment shares and labels for a period selection.

    ``"all"`` gives one moment per (sector, period); ``"pooled"`` sums each
    sector's moment across periods; an integer keeps one period only.
    """
    S = design.S_moment
    codes = [str(c) for c in ds.moment_codes]
    if selection == "pooled":
        return S, codes
    periods = range(ds.T) if selection == "all" else [selection]
    blocks, labels = [], []
    for t in periods:
        mask = (design.period_index == t).astype(float)
        blocks.append(S * mask[:, None])
        labels += [f"{c}@{ds.periods[t]}" for c in codes]
    return np.hstack(blocks), labels


def run_shares_test(ds: PanelDataset, sic_level: int | None = None, period_selection="all",
                    config: BootstrapConfig | None = None, refit_per_period: bool = False) -> TestResult:
    """Fit TSLS, build the share moments and bootstrap the max statistic.

    Parameters
    ----------
    ds : PanelDataset
    sic_level : {2, 3, 4} or None
        Aggregate moment shares to this many code digits first.
    period_selection : "all", "pooled", period label or index
    config : BootstrapConfig
    refit_per_period : bool
        For a single-period selection, refit TSLS on that period's rows only
        instead of using the pooled fit.
    """
    config = config or BootstrapConfig()
    start = time.perf_counter()
    if sic_level is not None:
        ds = aggregate_sic(ds, sic_level)
    selection = resolve_period(ds, period_selection)
    design = stack_panel(ds)
    if refit_per_period and isinstance(selection, int):
        design = design.subset(design.period_index == selection)
    fit = fit_tsls(design, ds.control_names)
    M, labels = moment_matrix(ds, design, selection)
    details = {
        "sic_level": sic_level,
        "period_selection": selection if isinstance(selection, str) else ds.periods[selection],
        "refit_per_period": refit_per_period,
        "moments_requested": len(labels),
        "n_clusters": int(np.unique(design.obs_cluster.astype(str)).size),
        "beta_hat": fit.beta,
    }
    try:
        infl = shares_influence(design, fit, design.obs_cluster, M, labels)
    except DegenerateMomentsError as exc:
        result = degenerate_result(exc.labels, config, details)
    else:
        result = max_stat_test(infl, config, details)
    result.config.update({"test": "shares", "sic_level": sic_level,
                          "period_selection": details["period_selection"],
                          "refit_per_period": refit_per_period})
    result.timing["total_seconds"] = time.perf_counter() - start
    return result
