"""Standard errors for long panels.

The score ``(1/nT) sum_it Z_it eps_it`` splits into a time-series part
``Z_t' zeta_t`` (the cross-sectional mean of ``S_it eps_it``) and a panel part
``Z_t'(S_it eps_it - zeta_t)``.  The first converges at rate ``1/sqrt(T)``,
the second at ``1/sqrt(nT)``; the variance of ``beta_hat`` adds the two.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data import PanelDataset, StackedDesign
from .errors import DataError
from .tsls import TslsFit, fit_tsls

SHORT_PANEL_T = 10


@dataclass(frozen=True, eq=False)
class ScoreDecomposition:
    """Time-series and panel components of the IV score.

    Attributes
    ----------
    zeta_hat : array (T, p)
        ``(1/n) sum_i S_it eps_it``.
    nu_hat : array (n, T)
        ``Z_t'(S_it eps_it - zeta_hat_t)``.
    ts_series : array (T,)
        ``Z_t' zeta_hat_t``.
    D_hat : float
        ``(1/nT) sum_it X_it Z_it``.
    """

    zeta_hat: np.ndarray
    nu_hat: np.ndarray
    ts_series: np.ndarray
    D_hat: float

    @property
    def n(self) -> int:
        return self.nu_hat.shape[0]

    @property
    def T(self) -> int:
        return self.nu_hat.shape[1]


@dataclass(frozen=True)
class LongPanelVariance:
    var_zeta: float
    var_nu: float
    se_beta: float
    hac_bandwidth: int
    var_zeta_uncorrected: float
    small_sample_factor: float
    n: int
    T: int
    D_hat: float

    @property
    def time_series_term(self) -> float:
        """``var_zeta / (D^2 T)``, the first summand of ``se_beta**2``."""
        return self.var_zeta / (self.D_hat**2 * self.T)

    @property
    def panel_term(self) -> float:
        return self.var_nu / (self.D_hat**2 * self.n * self.T)

    def to_dict(self) -> dict:
        return {
            "se_beta": self.se_beta,
            "var_zeta": self.var_zeta,
            "var_zeta_uncorrected": self.var_zeta_uncorrected,
            "small_sample_factor": self.small_sample_factor,
            "var_nu": self.var_nu,
            "hac_bandwidth": self.hac_bandwidth,
            "time_series_term": self.time_series_term,
            "panel_term": self.panel_term,
            "D_hat": self.D_hat,
            "n": self.n,
            "T": self.T,
        }


def decompose_score(ds: PanelDataset, fit: TslsFit) -> ScoreDecomposition:
    """Split the score of ``fit`` into its time-series and panel components."""
    n, T = ds.n, ds.T
    if T < 2:
        raise DataError(f"long-panel decomposition needs T >= 2, got {T}")
    eps = np.asarray(fit.eps_hat, dtype=float).reshape(n, T)
    Se = ds.s_z * eps[:, :, None]
    zeta = Se.mean(axis=0)
    nu = np.einsum("itp,tp->it", Se - zeta, ds.shock_z)
    ts = np.einsum("tp,tp->t", zeta, ds.shock_z)
    D = float(np.mean(ds.x * ds.instrument))
    return ScoreDecomposition(zeta_hat=zeta, nu_hat=nu, ts_series=ts, D_hat=D)


def auto_bandwidth(T: int) -> int:
    return int(math.floor(1.3 * float(np.cbrt(T))))


def bartlett_lrv(series, bandwidth: int) -> float:
    """Bartlett-kernel long-run variance of a demeaned series."""
    u = np.asarray(series, dtype=float)
    u = u - u.mean()
    T = u.size
    lrv = float(u @ u) / T
    for lag in range(1, min(bandwidth, T - 1) + 1):
        lrv += 2.0 * (1.0 - lag / (bandwidth + 1.0)) * float(u[lag:] @ u[:-lag]) / T
    return max(lrv, 0.0)


def small_sample_factor(T: int, bandwidth: int) -> float:
    """Inflation ``1 / (1 - (L + 1) / T)`` offsetting the zero-sum constraint.

    The time-series score sums to zero by the IV normal equations, so for a
    serially uncorrelated series the Bartlett estimator has expectation
    ``(1 - (L + 1) / T)`` times the true variance.  Returns 1 when
    ``T <= L + 1``.
    """
    L = min(bandwidth, T - 1)
    return 1.0 / (1.0 - (L + 1) / T) if T > L + 1 else 1.0


def variance_formula(D_hat: float, var_zeta: float, var_nu: float, n: int, T: int) -> float:
    """``D^-2 (var_zeta / T + var_nu / (n T))``."""
    return (var_zeta / T + var_nu / (n * T)) / D_hat**2


def longpanel_se(dec: ScoreDecomposition, bandwidth="auto", bias_correct: bool = True,
                 small_sample: bool = True) -> LongPanelVariance:
    """Standard error of ``beta_hat`` from a score decomposition.

    Parameters
    ----------
    dec : ScoreDecomposition
    bandwidth : "auto" or int
        Bartlett lag truncation; ``"auto"`` uses ``floor(1.3 T^(1/3))``.
    bias_correct : bool
        ``ts_series`` is built from estimated cross-sectional means, so its
        variance also contains ``var_nu / n`` of panel noise.  When true this
        amount is subtracted (floored at 0) so the panel variance is not
        counted twice.
    small_sample : bool
        Rescale the HAC estimate by :func:`small_sample_factor`.
    """
    n, T = dec.n, dec.T
    if bandwidth == "auto" or bandwidth is None:
        L = auto_bandwidth(T)
    else:
        L = int(bandwidth)
        if L < 0:
            raise DataError(f"bandwidth must be non-negative, got {bandwidth}")
    if T < SHORT_PANEL_T:
        warnings.warn(
            f"only T={T} periods: an approximation that relies on T growing large is unreliable here",
            UserWarning, stacklevel=2,
        )
    if dec.D_hat == 0.0:
        raise DataError("denominator D_hat is zero")
    factor = small_sample_factor(T, L) if small_sample else 1.0
    raw = factor * bartlett_lrv(dec.ts_series, L)
    var_nu = float(np.sum(dec.nu_hat**2)) / (n * T)
    var_zeta = max(raw - var_nu / n, 0.0) if bias_correct else raw
    se = math.sqrt(variance_formula(dec.D_hat, var_zeta, var_nu, n, T))
    return LongPanelVariance(var_zeta=var_zeta, var_nu=var_nu, se_beta=se, hac_bandwidth=L,
                             var_zeta_uncorrected=raw, small_sample_factor=factor, n=n, T=T, D_hat=dec.D_hat)


def unweighted_design(ds: PanelDataset) -> StackedDesign:
    """Stacked design with unit weights and no controls (the long-panel model)."""
    n, T = ds.n, ds.T
    return StackedDesign(
        y=ds.y.reshape(-1), x=ds.x.reshape(-1), W=np.zeros((n * T, 0)),
        Z=ds.instrument.reshape(-1), S=ds.s_z.reshape(n * T, ds.p),
        S_moment=ds.s_z.reshape(n * T, ds.p), weight=np.ones(n * T),
        obs_cluster=ds.obs_cluster.reshape(-1),
        unit_index=np.repeat(np.arange(n), T), period_index=np.tile(np.arange(T), n),
        n=n, T=T,
    )


def longpanel_fit(ds: PanelDataset, bandwidth="auto", bias_correct: bool = True, small_sample: bool = True):
    """Unweighted IV fit without controls followed by :func:`longpanel_se`.

    Returns ``(fit, decomposition, variance)``.
    """
    fit = fit_tsls(unweighted_design(ds))
    dec = decompose_score(ds, fit)
    return fit, dec, longpanel_se(dec, bandwidth, bias_correct, small_sample)
