"""Overidentification test when shocks are the exogenous component.

Under the null the residualized instrument is uncorrelated with any function
``g(eps, W, S)``.  The influence contributions live at the sector level (one
row per sector and period), scaled by an estimate ``E_hat`` of the demeaned
shocks, and are clustered by sector groups.
"""

from __future__ import annotations

import json
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .bootstrap import BootstrapConfig, InfluenceMatrix, TestResult, degenerate_result, max_stat_test
from .data import PanelDataset, StackedDesign, stack_panel
from .errors import DataError, DegenerateMomentsError, NumericalError
from .overid_shares import cluster_sums, studentize
from .tsls import TslsFit, fit_tsls, residualize_on_controls

DEFAULT_LAMBDA = 1e-5
GRAM_RCOND = 1e-12
LOGIT_CENTERS = tuple(round(-2.25 + 0.25 * k, 2) for k in range(19))


# ---------------------------------------------------------------------------
# Moment functions
# ---------------------------------------------------------------------------


def _logit_pdf(u):
    e = np.exp(-np.abs(u))
    return e / (1.0 + e) ** 2


def _moment_kernel(kind: str, params: dict):
    """Return ``(g, dg/deps)`` as vectorized functions of eps."""
    if kind == "square":
        return (lambda e: e * e), (lambda e: 2.0 * e)
    if kind == "power":
        k = int(params["exponent"])
        if k < 1:
            raise DataError("power moments need a positive integer exponent")
        return (lambda e: e**k), (lambda e: k * e ** (k - 1))
    if kind == "logit_pdf":
        a = float(params["center"])
        return (lambda e: _logit_pdf(e - a)), (lambda e: -_logit_pdf(e - a) * np.tanh((e - a) / 2.0))
    if kind == "gaussian_pdf":
        a = float(params["center"])
        c = 1.0 / np.sqrt(2.0 * np.pi)
        return (lambda e: c * np.exp(-0.5 * (e - a) ** 2)), (lambda e: -(e - a) * c * np.exp(-0.5 * (e - a) ** 2))
    raise DataError(f"unknown moment kind {kind!r}")


@dataclass(frozen=True)
class MomentSpec:
    kind: str
    params: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        if "center" in self.params:
            return f"{self.kind}({self.params['center']:g})"
        if "exponent" in self.params:
            return f"power({self.params['exponent']})"
        return self.kind


class MomentFunctionSet:
    """A vector of moment functions ``g_j(eps, W, S)`` with analytic eps-derivatives.

    The built-in kinds depend on ``eps`` only; ``W`` and ``S`` are accepted so
    user subclasses can override :meth:`values` and :meth:`derivs`.
    """

    def __init__(self, specs):
        self.specs = tuple(specs)
        if not self.specs:
            raise DataError("a moment set needs at least one function")
        self._kernels = [_moment_kernel(s.kind, s.params) for s in self.specs]

    @property
    def q(self) -> int:
        return len(self.specs)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(s.label for s in self.specs)

    def values(self, eps, W=None, S=None) -> np.ndarray:
        eps = np.asarray(eps, dtype=float)
        return np.column_stack([g(eps) for g, _ in self._kernels])

    def derivs(self, eps, W=None, S=None) -> np.ndarray:
        eps = np.asarray(eps, dtype=float)
        return np.column_stack([dg(eps) for _, dg in self._kernels])

    def eval(self, j: int, eps, W=None, S=None):
        return self._kernels[j][0](np.asarray(eps, dtype=float))

    def deval(self, j: int, eps, W=None, S=None):
        return self._kernels[j][1](np.asarray(eps, dtype=float))

    def to_dict(self) -> dict:
        return {"moments": [{"kind": s.kind, **s.params} for s in self.specs]}

    @classmethod
    def from_dict(cls, raw: dict) -> MomentFunctionSet:
        """Build from ``{"moments": [{"kind": ..., "center": ...}, ...]}``.

        An entry may give ``"centers": [...]`` instead of ``"center"`` to
        expand into one moment per center.
        """
        entries = raw.get("moments")
        if not isinstance(entries, list):
            raise DataError("moment spec must contain a 'moments' list")
        specs = []
        for entry in entries:
            entry = dict(entry)
            kind = entry.pop("kind", None)
            if kind is None:
                raise DataError("every moment entry needs a 'kind'")
            centers = entry.pop("centers", None)
            if centers is not None:
                specs += [MomentSpec(kind, {**entry, "center": float(c)}) for c in centers]
            else:
                specs.append(MomentSpec(kind, entry))
        return cls(specs)

    @classmethod
    def from_json(cls, path) -> MomentFunctionSet:
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError:
            raise DataError(f"moment spec file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"moment spec {path} is not valid JSON: {exc}") from None


def logit_moment_set() -> MomentFunctionSet:
    """``eps**2`` plus nineteen logistic densities centred at -2.25, -2.00, ..., 2.25."""
    return MomentFunctionSet(
        [MomentSpec("square")] + [MomentSpec("logit_pdf", {"center": a}) for a in LOGIT_CENTERS]
    )


# ---------------------------------------------------------------------------
# Demeaned-shock estimators
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ShockResidual:
    """Estimate of the shocks minus their conditional mean, ``T x p``."""

    e_hat: np.ndarray
    method: str
    lam: float = 0.0
    q_matrix: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.e_hat)):
            raise NumericalError("shock residual estimate is not finite")


def _instrument_residual(ds: PanelDataset, pi_hat) -> np.ndarray:
    pi_hat = np.asarray(pi_hat, dtype=float)
    return ds.instrument - (ds.w @ pi_hat if pi_hat.size else 0.0)


def ridge_shock_residual(ds: PanelDataset, pi_hat, lam: float = DEFAULT_LAMBDA) -> ShockResidual:
    """Per-period ridge regression of ``Z - W'pi_hat`` on the shares.

    ``E_t = (sum_i S_it S_it' + lam I)^{-1} sum_i S_it (Z_it - W_it' pi_hat)``.
    """
    if lam < 0:
        raise DataError(f"ridge penalty must be non-negative, got {lam}")
    resid = _instrument_residual(ds, pi_hat)
    out = np.empty((ds.T, ds.p))
    for t in range(ds.T):
        S = ds.s_z[:, t, :]
        gram = S.T @ S
        if lam == 0:
            ev = np.linalg.eigvalsh(gram)
            if ev[0] <= GRAM_RCOND * max(ev[-1], np.finfo(float).tiny):
                raise NumericalError(
                    f"share Gram matrix of period {ds.periods[t]} is singular; "
                    "use a positive ridge penalty"
                )
        a = gram + lam * np.eye(ds.p)
        out[t] = linalg.solve(a, S.T @ resid[:, t], assume_a="pos")
    return ShockResidual(out, "ridge", float(lam))


def projection_shock_residual(shock_z, Q) -> ShockResidual:
    """Residual of each period's shocks from the column space of ``Q``.

    ``Q`` is ``p x k`` (common to all periods) or ``T x p x k``.
    """
    shock_z = np.asarray(shock_z, dtype=float)
    Q = np.asarray(Q, dtype=float)
    T, p = shock_z.shape
    Qs = np.broadcast_to(Q, (T,) + Q.shape) if Q.ndim == 2 else Q
    if Qs.shape[:2] != (T, p):
        raise DataError(f"Q has shape {Q.shape}, expected ({p}, k) or ({T}, {p}, k)")
    out = np.empty_like(shock_z)
    for t in range(T):
        q, r = np.linalg.qr(Qs[t])
        d = np.abs(np.diag(r))
        if d.size == 0 or d.min() <= 1e-12 * d.max():
            raise DataError("projection matrix Q is rank deficient")
        out[t] = shock_z[t] - q @ (q.T @ shock_z[t])
    return ShockResidual(out, "projection", 0.0, Q.copy())


# ---------------------------------------------------------------------------
# Influence and test
# ---------------------------------------------------------------------------


def moment_corrections(design: StackedDesign, fit: TslsFit, g: MomentFunctionSet):
    """Moment values and the ``delta_hat`` / ``kappa_hat`` corrections.

    Returns ``G`` (rows x q), ``delta`` (d x q), ``kappa`` (q,) and the
    corrected contributions ``H = G - W delta - eps kappa``.
    """
    eps, W, w = fit.eps_hat, design.W, design.weight
    G = g.values(eps, W, design.S)
    dG = g.derivs(eps, W, design.S)
    delta, G_res = residualize_on_controls(G, W, w)
    fs = w * fit.z_dot * design.x
    denom = fs.sum()
    if denom == 0.0:
        raise NumericalError("first-stage covariance is zero; kappa is undefined")
    kappa = fs @ dG / denom
    return G, delta, kappa, G_res - eps[:, None] * kappa


def shocks_influence(ds: PanelDataset, fit: TslsFit, g: MomentFunctionSet, e_hat: ShockResidual,
                     sector_cluster=None, design: StackedDesign | None = None) -> InfluenceMatrix:
    """Sector-level influence matrix clustered by sector groups.

    Row ``(t, s)`` before clustering is
    ``E_ts * sum_i S_its w_it (g_j - W_it' delta_j - eps_it kappa_j)``; rows of
    sectors in one cluster are summed over sectors and periods.
    """
    design = stack_panel(ds) if design is None else design
    clusters = np.asarray(ds.sector_cluster if sector_cluster is None else sector_cluster).astype(str)
    if clusters.shape != (ds.p,):
        raise DataError("sector_cluster needs one label per sector")
    E = np.asarray(e_hat.e_hat, dtype=float)
    if E.shape != (ds.T, ds.p):
        raise DataError(f"shock residual has shape {E.shape}, expected ({ds.T}, {ds.p})")
    G, _, _, H = moment_corrections(design, fit, g)
    w = design.weight
    T = ds.T
    wH = (w[:, None] * H).reshape(ds.n, T, -1)
    awH = (w[:, None] * np.abs(H)).reshape(ds.n, T, -1)
    # sector-period rows, period-major: row t*p + s
    U = np.concatenate([E[t][:, None] * (ds.s_z[:, t, :].T @ wH[:, t, :]) for t in range(T)])
    ref = np.concatenate([np.abs(E[t])[:, None] * (ds.s_z[:, t, :].T @ awH[:, t, :]) for t in range(T)])
    row_cluster = np.tile(clusters, T)
    groups, U_c = cluster_sums(U, row_cluster)
    if groups.size < 2:
        raise DataError(f"need at least 2 sector clusters, got {groups.size}")
    _, ref_c = cluster_sums(ref, row_cluster)
    sigma, keep = studentize(U_c, ref_c)
    labels = g.labels
    if not keep.any():
        raise DegenerateMomentsError("all shock moments have zero estimated variance", labels)
    dropped = tuple(l for l, k in zip(labels, keep) if not k)
    if dropped:
        warnings.warn(f"dropped {len(dropped)} degenerate moment(s)", RuntimeWarning, stacklevel=2)
    raw = (w[:, None] * G[:, keep] * fit.z_dot[:, None]).sum(axis=0) / sigma[keep]
    return InfluenceMatrix(
        psi_hat=U_c[:, keep] / sigma[keep],
        sigma_hat=sigma[keep],
        raw_stats=raw,
        labels=tuple(l for l, k in zip(labels, keep) if k),
        dropped=dropped,
        group_labels=tuple(groups),
    )


def run_shocks_test(ds: PanelDataset, g: MomentFunctionSet | None = None, e_method: str = "ridge",
                    lam: float = DEFAULT_LAMBDA, q_matrix=None,
                    config: BootstrapConfig | None = None) -> TestResult:
    """TSLS fit, shock residual, sector influence and bootstrap in one call.

    Parameters
    ----------
    ds : PanelDataset
    g : MomentFunctionSet, optional
        Defaults to :func:`logit_moment_set`.
    e_method : {"ridge", "projection"}
    lam : float
        Ridge penalty (ignored for projection).
    q_matrix : array, optional
        Aggregate matrix for the projection estimator.
    config : BootstrapConfig
    """
    config = config or BootstrapConfig()
    g = g or logit_moment_set()
    start = time.perf_counter()
    design = stack_panel(ds)
    fit = fit_tsls(design, ds.control_names)
    if e_method == "ridge":
        e_hat = ridge_shock_residual(ds, fit.pi_hat, lam)
    elif e_method == "projection":
        if q_matrix is None:
            raise DataError("projection shock residual needs a Q matrix")
        e_hat = projection_shock_residual(ds.shock_z, q_matrix)
    else:
        raise DataError(f"unknown shock residual method {e_method!r}")
    details = {
        "e_method": e_method,
        "ridge_lambda": float(lam) if e_method == "ridge" else None,
        "n_sector_clusters": int(np.unique(ds.sector_cluster.astype(str)).size),
        "beta_hat": fit.beta,
    }
    try:
        infl = shocks_influence(ds, fit, g, e_hat, design=design)
    except DegenerateMomentsError as exc:
        result = degenerate_result(exc.labels, config, details)
    else:
        result = max_stat_test(infl, config, details)
    result.config.update({"test": "shocks", "e_method": e_method,
                          "ridge_lambda": details["ridge_lambda"], "moments": g.to_dict()["moments"]})
    result.timing["total_seconds"] = time.perf_counter() - start
    return result
