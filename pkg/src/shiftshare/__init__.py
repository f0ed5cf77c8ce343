"""Estimation and specification tests for shift-share instrument designs."""

from .bootstrap import BootstrapConfig, InfluenceMatrix, TestResult, max_stat_test
from .data import PanelDataset, Schema, StackedDesign, aggregate_sic, load_csv, stack_panel, write_csv
from .diagnostics import (
    PrimitiveSpec,
    share_corr_check,
    sign_diagnostic_shares,
    sign_diagnostic_shocks,
    weights_from_primitives,
    within_cluster_shock_cov,
)
from .errors import DataError, DegenerateInstrumentError, NumericalError, SingularDesignError
from .longpanel import decompose_score, longpanel_fit, longpanel_se
from .overid_shares import run_shares_test, shares_influence
from .overid_shocks import (
    MomentFunctionSet,
    logit_moment_set,
    projection_shock_residual,
    ridge_shock_residual,
    run_shocks_test,
    shocks_influence,
)
from .simulate import (
    fit_shares_dgp,
    fit_shocks_dgp,
    rejection_study,
    simulate_shares_dgp,
    simulate_shocks_dgp,
)
from .tsls import TslsFit, fit_tsls, residualize_on_controls

__version__ = "0.1.0"
