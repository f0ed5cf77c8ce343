"""Weighted residualization and just-identified TSLS with a Bartik instrument."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .data import StackedDesign
from .errors import DegenerateInstrumentError, SingularDesignError

COND_FAIL = 1e12
COND_WARN = 1e8
RELEVANCE_TOL = 1e-10
NORMAL_EQ_TOL = 1e-8


@dataclass(frozen=True)
class _WeightedQR:
    """Pivoted QR of ``sqrt(w) * W`` with equilibrated columns."""

    q: np.ndarray
    r: np.ndarray
    piv: np.ndarray
    col_scale: np.ndarray
    sqrt_w: np.ndarray
    cond: float

    def solve(self, v: np.ndarray) -> np.ndarray:
        rhs = self.q.T @ (self.sqrt_w[:, None] * v if v.ndim == 2 else self.sqrt_w * v)
        sol = linalg.solve_triangular(self.r, rhs)
        coef = np.empty_like(sol)
        coef[self.piv] = sol
        return coef / (self.col_scale[:, None] if v.ndim == 2 else self.col_scale)


def _factor(W: np.ndarray, weight: np.ndarray, names=None) -> _WeightedQR | None:
    W = np.asarray(W, dtype=float)
    if W.ndim != 2:
        raise ValueError(f"W must be a matrix, got shape {W.shape}")
    d = W.shape[1]
    if d == 0:
        return None
    names = list(names) if names is not None else [f"column {k}" for k in range(d)]
    sw = np.sqrt(np.asarray(weight, dtype=float))
    A = W * sw[:, None]
    norms = np.linalg.norm(A, axis=0)
    zero = [names[k] for k in range(d) if norms[k] == 0.0]
    if zero:
        raise SingularDesignError(f"singular design: all-zero control column(s) {zero}", zero)
    if W.shape[0] < d:
        raise SingularDesignError(f"singular design: {W.shape[0]} rows for {d} controls", names)
    q, r, piv = linalg.qr(A / norms, mode="economic", pivoting=True)
    sv = np.linalg.svd(r, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf
    if cond > COND_FAIL:
        diag = np.abs(np.diag(r))
        bad = [names[piv[k]] for k in range(d) if diag[k] <= diag[0] / np.sqrt(COND_FAIL)]
        bad = bad or [names[piv[-1]]]
        raise SingularDesignError(
            f"singular design: condition number {cond:.3g} exceeds {COND_FAIL:.0e}; "
            f"collinear column(s) {bad}",
            bad,
        )
    return _WeightedQR(q=q, r=r, piv=piv, col_scale=norms, sqrt_w=sw, cond=cond)


def residualize_on_controls(v, W, weight, names=None):
    """Weighted least squares of ``v`` on ``W``.

    Parameters
    ----------
    v : array (N,) or (N, k)
    W : array (N, d)
        May have zero columns, in which case ``v`` is returned unchanged.
    weight : array (N,)
        Strictly positive regression weights.
    names : sequence of str, optional
        Column names used in error messages.

    Returns
    -------
    coef : array (d,) or (d, k)
    resid : array like ``v``
        ``v - W @ coef``; satisfies ``sum(w * W * resid) == 0``.

    Raises
    ------
    SingularDesignError
        If the column-equilibrated weighted design has condition number above
        ``1e12``.
    """
    v = np.asarray(v, dtype=float)
    W = np.asarray(W, dtype=float)
    fac = _factor(W, weight, names)
    if fac is None:
        shape = (0,) + v.shape[1:]
        return np.zeros(shape), v.copy()
    coef = fac.solve(v)
    return coef, v - W @ coef


@dataclass(frozen=True)
class TslsFit:
    """Result of :func:`fit_tsls`."""

    beta: float
    gamma_s: np.ndarray
    pi_hat: np.ndarray
    eps_hat: np.ndarray
    z_dot: np.ndarray
    first_stage_cov: float
    condition_report: dict = field(default_factory=dict)


def fit_tsls(design: StackedDesign, control_names=None) -> TslsFit:
    """Weighted just-identified IV of ``y`` on ``(x, W)`` with instruments ``(Z, W)``.

    Uses the partialled-out form: ``beta = sum(w z_dot y) / sum(w z_dot x)``
    with ``z_dot`` the weighted residual of ``Z`` on ``W``; ``gamma_s`` is the
    weighted regression of ``y - x beta`` on ``W``.
    """
    y, x, Z, W, w = design.y, design.x, design.Z, design.W, design.weight
    fac = _factor(W, w, control_names)
    if fac is None:
        pi_hat, z_dot = np.zeros(0), Z.copy()
        cond = 1.0
    else:
        pi_hat = fac.solve(Z)
        z_dot = Z - W @ pi_hat
        cond = fac.cond

    first_stage = float(np.sum(w * z_dot * x))
    scale = np.sqrt(np.sum(w * z_dot**2) * np.sum(w * x**2))
    if scale == 0.0 or abs(first_stage) <= RELEVANCE_TOL * scale:
        raise DegenerateInstrumentError(
            f"degenerate instrument: first-stage covariance {first_stage:.3g} "
            f"is zero relative to its scale {scale:.3g}"
        )
    beta = float(np.sum(w * z_dot * y) / first_stage)
    if fac is None:
        gamma = np.zeros(0)
    else:
        gamma = fac.solve(y - x * beta)
    eps = y - x * beta - W @ gamma

    report = {"condition_number": cond, "warning": None}
    if cond > COND_WARN:
        report["warning"] = f"ill-conditioned controls (condition number {cond:.3g})"
        warnings.warn(report["warning"], RuntimeWarning, stacklevel=2)

    # normal equations sum w (Z, W)' eps = 0, relative to sum w |A| |y|
    A = np.column_stack([Z, W])
    ne = A.T @ (w * eps)
    ne_scale = np.abs(A).T @ (w * (np.abs(y) + np.abs(x * beta))) + np.finfo(float).tiny
    rel = float(np.max(np.abs(ne) / ne_scale))
    report["normal_equation_residual"] = rel
    if rel > NORMAL_EQ_TOL:
        msg = f"IV normal equations hold only to {rel:.2e} relative"
        report["warning"] = msg if report["warning"] is None else report["warning"] + "; " + msg
        warnings.warn(msg, RuntimeWarning, stacklevel=2)

    return TslsFit(
        beta=beta,
        gamma_s=gamma,
        pi_hat=pi_hat,
        eps_hat=eps,
        z_dot=z_dot,
        first_stage_cov=first_stage,
        condition_report=report,
    )
