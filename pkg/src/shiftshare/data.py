"""Panel data representation, CSV ingestion and stacking.

A :class:`PanelDataset` stores a balanced panel of ``n`` units observed over
``T`` periods with ``p`` sectors.  Shares live at the unit-period level and
shocks at the period-sector level; the Bartik instrument of observation
``(i, t)`` is ``s_z[i, t] @ shock_z[t]``.

When shares are aggregated to coarser industry codes (:func:`aggregate_sic`)
only the *moment* shares change; the instrument keeps being built from the
native shares and shocks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .errors import DataError

SHARE_SUM_TOL = 1e-9


# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Schema:
    """Maps logical roles to CSV column names.

    Only ``outcome``, ``regressor``, ``weight`` and ``cluster`` are required;
    share columns are found as ``share_prefix + sector_code``.
    """

    outcome: str
    regressor: str
    weight: str
    cluster: str
    unit: str = "unit"
    period: str = "period"
    controls: tuple[str, ...] = ()
    add_intercept: bool = False
    share_prefix: str = "s_"
    regressor_share_prefix: str | None = None
    sector_codes: tuple[str, ...] | None = None
    shock_layout: str = "long"
    shock_period: str = "period"
    shock_sector: str = "sector"
    shock_value: str = "shock"
    regressor_shock_value: str | None = None
    shock_prefix: str = ""
    regressor_shock_prefix: str | None = None
    sector_cluster: str | None = None
    sector_cluster_digits: int = 3

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> Schema:
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise DataError(f"unknown schema keys: {sorted(unknown)}")
        missing = [k for k in ("outcome", "regressor", "weight", "cluster") if k not in raw]
        if missing:
            raise DataError(f"schema is missing required roles: {missing}")
        kw = dict(raw)
        kw["controls"] = tuple(kw.get("controls", ()))
        if kw.get("sector_codes") is not None:
            kw["sector_codes"] = tuple(str(c) for c in kw["sector_codes"])
        if kw.get("shock_layout", "long") not in ("long", "wide"):
            raise DataError("shock_layout must be 'long' or 'wide'")
        return cls(**kw)

    @classmethod
    def from_json(cls, path: str | Path) -> Schema:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


def _frozen(a, dtype=float):
    if a is None:
        return None
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Balanced ``n x T`` panel with ``p`` sectors and ``d`` controls.

    Arrays are copied and made read-only on construction.
    """

    y: np.ndarray
    x: np.ndarray
    w: np.ndarray
    s_z: np.ndarray
    shock_z: np.ndarray
    reg_weight: np.ndarray
    obs_cluster: np.ndarray
    sector_code: np.ndarray
    sector_cluster: np.ndarray
    s_x: np.ndarray | None = None
    shock_x: np.ndarray | None = None
    control_names: tuple[str, ...] = ()
    unit_ids: tuple[str, ...] | None = None
    periods: tuple[str, ...] | None = None
    # coarser moment shares produced by aggregate_sic; None means "use s_z"
    s_moment: np.ndarray | None = None
    moment_code: np.ndarray | None = None
    moment_cluster: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        set_ = object.__setattr__
        for name in ("y", "x", "w", "s_z", "shock_z", "reg_weight", "s_x", "shock_x", "s_moment"):
            set_(self, name, _frozen(getattr(self, name)))
        for name in ("obs_cluster", "sector_code", "sector_cluster", "moment_code", "moment_cluster"):
            v = getattr(self, name)
            if v is not None:
                set_(self, name, _frozen(np.asarray(v).astype(str), dtype=object))
        if self.w.ndim == 2:
            set_(self, "w", _frozen(self.w[:, :, None]))
        n, T = self.y.shape if self.y.ndim == 2 else (-1, -1)
        if self.unit_ids is None:
            set_(self, "unit_ids", tuple(str(i) for i in range(n)))
        if self.periods is None:
            set_(self, "periods", tuple(str(t) for t in range(T)))
        if not self.control_names:
            set_(self, "control_names", tuple(f"w{k}" for k in range(self.w.shape[-1])))
        self._validate()

    # -- shape helpers ------------------------------------------------------
    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def p(self) -> int:
        return self.s_z.shape[2]

    @property
    def d(self) -> int:
        return self.w.shape[2]

    @property
    def moment_shares(self) -> np.ndarray:
        return self.s_z if self.s_moment is None else self.s_moment

    @property
    def moment_codes(self) -> np.ndarray:
        return self.sector_code if self.moment_code is None else self.moment_code

    @property
    def moment_clusters(self) -> np.ndarray:
        return self.sector_cluster if self.moment_cluster is None else self.moment_cluster

    @property
    def instrument(self) -> np.ndarray:
        """Bartik instrument ``Z[i, t] = s_z[i, t] . shock_z[t]``."""
        return np.einsum("itp,tp->it", self.s_z, self.shock_z)

    def with_arrays(self, **changes) -> PanelDataset:
        """Copy of the dataset with some fields replaced (re-validated)."""
        return replace(self, **changes)

    # -- validation ---------------------------------------------------------
    def _validate(self):
        if self.y.ndim != 2:
            raise DataError(f"y must be an n x T matrix, got shape {self.y.shape}")
        n, T = self.y.shape
        if n < 1 or T < 1:
            raise DataError("dataset must contain at least one unit and one period")
        expect = {
            "x": (n, T),
            "reg_weight": (n, T),
            "obs_cluster": (n, T),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise DataError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.w.shape[:2] != (n, T):
            raise DataError(f"w has shape {self.w.shape}, expected ({n}, {T}, d)")
        if self.s_z.ndim != 3 or self.s_z.shape[:2] != (n, T):
            raise DataError(f"s_z has shape {self.s_z.shape}, expected ({n}, {T}, p)")
        p = self.s_z.shape[2]
        if self.shock_z.shape != (T, p):
            raise DataError(f"shock_z has shape {self.shock_z.shape}, expected ({T}, {p})")
        if self.sector_code.shape != (p,) or self.sector_cluster.shape != (p,):
            raise DataError("sector_code and sector_cluster need one entry per sector")
        if len(set(self.sector_code)) != p:
            raise DataError("sector codes must be unique")
        if len(self.control_names) != self.w.shape[2]:
            raise DataError("control_names must name every control column")
        if (self.s_x is None) != (self.shock_x is None):
            raise DataError("s_x and shock_x must be supplied together")
        if self.s_x is not None:
            if self.s_x.shape != self.s_z.shape or self.shock_x.shape != self.shock_z.shape:
                raise DataError("regressor shares/shocks must match instrument shares/shocks in shape")
        if self.s_moment is not None:
            q = self.s_moment.shape[2]
            if self.s_moment.shape[:2] != (n, T):
                raise DataError("s_moment must be n x T x q")
            if self.moment_code is None or self.moment_code.shape != (q,):
                raise DataError("moment_code must label every aggregated share column")
            if self.moment_cluster is None or self.moment_cluster.shape != (q,):
                raise DataError("moment_cluster must label every aggregated share column")

        arrays = {"y": self.y, "x": self.x, "w": self.w, "s_z": self.s_z,
                  "shock_z": self.shock_z, "reg_weight": self.reg_weight}
        if self.s_x is not None:
            arrays.update(s_x=self.s_x, shock_x=self.shock_x)
        for name, a in arrays.items():
            if not np.all(np.isfinite(a)):
                raise DataError(f"{name} contains non-finite values")
        for name in ("s_z", "s_x"):
            s = getattr(self, name)
            if s is None:
                continue
            if np.any(s < 0):
                i, t, j = np.argwhere(s < 0)[0]
                raise DataError(
                    f"negative share in {name}: unit {self.unit_ids[i]}, period {self.periods[t]}, "
                    f"sector {self.sector_code[j]} = {s[i, t, j]}"
                )
            sums = s.sum(axis=2)
            if np.any(sums > 1 + SHARE_SUM_TOL):
                i, t = np.argwhere(sums > 1 + SHARE_SUM_TOL)[0]
                raise DataError(
                    f"{name} shares of unit {self.unit_ids[i]}, period {self.periods[t]} "
                    f"sum to {sums[i, t]!r} > 1"
                )
        if np.any(self.reg_weight <= 0):
            raise DataError("regression weights must be strictly positive")
        if not np.all(np.isfinite(self.instrument)):
            raise DataError("instrument S'Z is not finite")


# ---------------------------------------------------------------------------
# Stacking
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StackedDesign:
    """Long (unit-major, then period) view of a panel: row ``r = i*T + t``."""

    y: np.ndarray
    x: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    S: np.ndarray
    S_moment: np.ndarray
    weight: np.ndarray
    obs_cluster: np.ndarray
    unit_index: np.ndarray
    period_index: np.ndarray
    n: int
    T: int

    @property
    def rows(self) -> int:
        return self.y.shape[0]

    def subset(self, mask) -> StackedDesign:
        """Rows selected by a boolean mask (used for per-period refits)."""
        mask = np.asarray(mask, dtype=bool)
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in ("y", "x", "W", "Z", "S", "S_moment", "weight", "obs_cluster",
                     "unit_index", "period_index"):
            kw[name] = _frozen(kw[name][mask], dtype=kw[name].dtype)
        return StackedDesign(**kw)


def stack_panel(ds: PanelDataset) -> StackedDesign:
    """Stack an ``n x T`` panel into ``nT`` rows ordered unit-major."""
    n, T = ds.n, ds.T
    units, periods = np.meshgrid(np.arange(n), np.arange(T), indexing="ij")
    return StackedDesign(
        y=_frozen(ds.y.reshape(-1)),
        x=_frozen(ds.x.reshape(-1)),
        W=_frozen(ds.w.reshape(n * T, ds.d)),
        Z=_frozen(ds.instrument.reshape(-1)),
        S=_frozen(ds.s_z.reshape(n * T, ds.p)),
        S_moment=_frozen(ds.moment_shares.reshape(n * T, -1)),
        weight=_frozen(ds.reg_weight.reshape(-1)),
        obs_cluster=_frozen(ds.obs_cluster.reshape(-1), dtype=object),
        unit_index=_frozen(units.reshape(-1), dtype=np.int64),
        period_index=_frozen(periods.reshape(-1), dtype=np.int64),
        n=n,
        T=T,
    )


# ---------------------------------------------------------------------------
# Industry-code aggregation
# ---------------------------------------------------------------------------


def aggregate_sic(ds: PanelDataset, level: int) -> PanelDataset:
    """Sum moment shares within ``level``-digit sector-code prefixes.

    Shocks and the instrument are left at the native level.  The moment
    clusters become the ``min(3, level)``-digit prefixes.
    """
    if level not in (2, 3, 4):
        raise DataError(f"SIC aggregation level must be 2, 3 or 4, got {level}")
    codes = [str(c) for c in ds.sector_code]
    native = {len(c) for c in codes}
    if any(len(c) < level for c in codes):
        short = next(c for c in codes if len(c) < level)
        raise DataError(f"aggregation level {level} exceeds length of sector code {short!r}")
    if native == {level}:
        return ds
    prefixes = [c[:level] for c in codes]
    groups = list(dict.fromkeys(prefixes))  # first-appearance order
    index = {g: k for k, g in enumerate(groups)}
    agg = np.zeros((len(codes), len(groups)))
    agg[np.arange(len(codes)), [index[g] for g in prefixes]] = 1.0
    s_agg = np.einsum("itp,pq->itq", ds.s_z, agg)
    cluster_digits = min(3, level)
    return ds.with_arrays(
        s_moment=s_agg,
        moment_code=np.array(groups, dtype=object),
        moment_cluster=np.array([g[:cluster_digits] for g in groups], dtype=object),
    )


# ---------------------------------------------------------------------------
# CSV input/output
# ---------------------------------------------------------------------------


def _sort_labels(labels):
    labels = list(dict.fromkeys(labels))
    try:
        return sorted(labels, key=float)
    except ValueError:
        return sorted(labels)


def _read_csv(path, **kw) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision="round_trip", encoding="utf-8", **kw)
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None


def _require(frame: pd.DataFrame, cols, path):
    for c in cols:
        if c not in frame.columns:
            raise DataError(f"missing column {c!r} in {path}")


def _numeric(frame: pd.DataFrame, cols, path) -> np.ndarray:
    block = frame[list(cols)]
    try:
        arr = block.to_numpy(dtype=float)
    except (TypeError, ValueError):
        bad = next(c for c in cols if pd.to_numeric(frame[c], errors="coerce").isna().any())
        raise DataError(f"column {bad!r} in {path} contains non-numeric cells") from None
    if not np.all(np.isfinite(arr)):
        r, c = np.argwhere(~np.isfinite(arr))[0]
        raise DataError(f"non-finite cell in column {cols[c]!r}, row {r + 2} of {path}")
    return arr


def _read_shocks(shock_path, schema: Schema, codes, periods):
    str_cols = {schema.shock_period: str, schema.shock_sector: str}
    if schema.sector_cluster:
        str_cols[schema.sector_cluster] = str
    frame = _read_csv(shock_path, dtype=str_cols if schema.shock_layout == "long" else {schema.shock_period: str})
    clusters = None
    if schema.shock_layout == "long":
        cols = [schema.shock_period, schema.shock_sector, schema.shock_value]
        if schema.regressor_shock_value:
            cols.append(schema.regressor_shock_value)
        _require(frame, cols, shock_path)
        if frame.duplicated([schema.shock_period, schema.shock_sector]).any():
            raise DataError(f"duplicate (period, sector) rows in {shock_path}")
        value_cols = [schema.shock_value] + ([schema.regressor_shock_value] if schema.regressor_shock_value else [])
        _numeric(frame, value_cols, shock_path)
        shock_codes = set(frame[schema.shock_sector])
        if codes is None:
            codes = list(dict.fromkeys(frame[schema.shock_sector]))
        unmatched = sorted(set(codes) ^ shock_codes)
        if unmatched:
            raise DataError(f"unmatched sector code(s) between shares and shocks: {unmatched[:10]}")
        wide = frame.pivot(index=schema.shock_period, columns=schema.shock_sector)
        missing_p = sorted(set(periods) - set(wide.index))
        if missing_p:
            raise DataError(f"shock file has no rows for period(s) {missing_p}")
        z = wide[schema.shock_value].loc[list(periods), list(codes)].to_numpy(dtype=float)
        x = None
        if schema.regressor_shock_value:
            x = wide[schema.regressor_shock_value].loc[list(periods), list(codes)].to_numpy(dtype=float)
        if not (np.all(np.isfinite(z)) and (x is None or np.all(np.isfinite(x)))):
            raise DataError(f"shock file {shock_path} does not cover every (period, sector) pair")
        if schema.sector_cluster:
            _require(frame, [schema.sector_cluster], shock_path)
            cl = frame.groupby(schema.shock_sector)[schema.sector_cluster].agg(lambda s: set(s))
            if any(len(v) != 1 for v in cl):
                raise DataError("each sector must belong to exactly one sector cluster")
            clusters = [next(iter(cl[c])) for c in codes]
    else:
        _require(frame, [schema.shock_period], shock_path)
        if frame[schema.shock_period].duplicated().any():
            raise DataError(f"duplicate period rows in {shock_path}")
        frame = frame.set_index(schema.shock_period)
        pref = schema.shock_prefix
        if codes is None:
            codes = [c[len(pref):] for c in frame.columns if c.startswith(pref)
                     and not (schema.regressor_shock_prefix and c.startswith(schema.regressor_shock_prefix))]
        zcols = [pref + c for c in codes]
        _require(frame.reset_index(), zcols, shock_path)
        extra = [c for c in frame.columns if c.startswith(pref) and c not in zcols
                 and not (schema.regressor_shock_prefix and c.startswith(schema.regressor_shock_prefix))]
        if extra:
            raise DataError(f"unmatched sector code(s) in shock file: {extra[:10]}")
        missing_p = sorted(set(periods) - set(frame.index))
        if missing_p:
            raise DataError(f"shock file has no rows for period(s) {missing_p}")
        frame = frame.loc[list(periods)]
        z = _numeric(frame, zcols, shock_path)
        x = None
        if schema.regressor_shock_prefix:
            xcols = [schema.regressor_shock_prefix + c for c in codes]
            _require(frame.reset_index(), xcols, shock_path)
            x = _numeric(frame, xcols, shock_path)
    return list(codes), z, x, clusters


def load_csv(obs_path, shock_path, schema: Schema) -> PanelDataset:
    """Read a balanced panel from an observation file and a shock file.

    Parameters
    ----------
    obs_path : path
        One row per (unit, period) with outcome, regressor, controls, weight,
        cluster and one ``share_prefix + code`` column per sector.
    shock_path : path
        Either long (period, sector, value) or wide (period x sectors).
    schema : Schema
        Column-name mapping.
    """
    obs = _read_csv(obs_path, dtype={schema.unit: str, schema.period: str, schema.cluster: str})
    base_cols = [schema.unit, schema.period, schema.outcome, schema.regressor,
                 schema.weight, schema.cluster, *schema.controls]
    _require(obs, base_cols, obs_path)
    if obs.duplicated([schema.unit, schema.period]).any():
        dup = obs[obs.duplicated([schema.unit, schema.period], keep=False)].iloc[0]
        raise DataError(f"duplicate (unit, period) = ({dup[schema.unit]}, {dup[schema.period]}) in {obs_path}")

    pref = schema.share_prefix
    xpref = schema.regressor_share_prefix
    if schema.sector_codes is not None:
        codes = list(schema.sector_codes)
    else:
        codes = [c[len(pref):] for c in obs.columns
                 if c.startswith(pref) and not (xpref and c.startswith(xpref))]
        if not codes:
            raise DataError(f"no share columns with prefix {pref!r} in {obs_path}")
    units = list(dict.fromkeys(obs[schema.unit]))
    periods = _sort_labels(obs[schema.period])
    n, T = len(units), len(periods)
    if len(obs) != n * T:
        raise DataError(f"panel is unbalanced: {len(obs)} rows for {n} units x {T} periods")

    codes, shock_z, shock_x, clusters = _read_shocks(shock_path, schema, codes, periods)
    share_cols = [pref + c for c in codes]
    _require(obs, share_cols, obs_path)
    if xpref:
        _require(obs, [xpref + c for c in codes], obs_path)

    uidx = {u: k for k, u in enumerate(units)}
    tidx = {t: k for k, t in enumerate(periods)}
    order = np.lexsort((obs[schema.period].map(tidx).to_numpy(), obs[schema.unit].map(uidx).to_numpy()))
    obs = obs.iloc[order].reset_index(drop=True)

    def panel(cols):
        return _numeric(obs, cols, obs_path).reshape(n, T, len(cols))

    w = panel(list(schema.controls)) if schema.controls else np.zeros((n, T, 0))
    names = list(schema.controls)
    if schema.add_intercept:
        w = np.concatenate([np.ones((n, T, 1)), w], axis=2)
        names = ["intercept", *names]
    if clusters is None:
        clusters = [c[: schema.sector_cluster_digits] for c in codes]
    ds = PanelDataset(
        y=panel([schema.outcome])[:, :, 0],
        x=panel([schema.regressor])[:, :, 0],
        w=w,
        s_z=panel(share_cols),
        shock_z=shock_z,
        reg_weight=panel([schema.weight])[:, :, 0],
        obs_cluster=obs[schema.cluster].to_numpy(dtype=object).reshape(n, T),
        sector_code=np.array(codes, dtype=object),
        sector_cluster=np.array(clusters, dtype=object),
        s_x=panel([xpref + c for c in codes]) if xpref else None,
        shock_x=shock_x,
        control_names=tuple(names),
        unit_ids=tuple(units),
        periods=tuple(periods),
    )
    if (ds.s_x is None) != (shock_x is None):
        raise DataError("regressor shares and regressor shocks must be configured together")
    return ds


def write_csv(ds: PanelDataset, obs_path, shock_path, schema: Schema) -> None:
    """Write ``ds`` in the layout :func:`load_csv` reads with ``schema``.

    Floats are written with ``repr`` so reading back is exact.
    """
    n, T = ds.n, ds.T
    cols: dict[str, Any] = {
        schema.unit: np.repeat(np.array(ds.unit_ids, dtype=object), T),
        schema.period: np.tile(np.array(ds.periods, dtype=object), n),
        schema.outcome: ds.y.reshape(-1),
        schema.regressor: ds.x.reshape(-1),
        schema.weight: ds.reg_weight.reshape(-1),
        schema.cluster: ds.obs_cluster.reshape(-1),
    }
    names = list(ds.control_names)
    offset = 0
    if schema.add_intercept:
        if not names or names[0] != "intercept":
            raise DataError("schema adds an intercept but the dataset has none in column 0")
        offset = 1
    if len(schema.controls) != ds.d - offset:
        raise DataError("schema controls do not match the dataset's control columns")
    for k, name in enumerate(schema.controls):
        cols[name] = ds.w[:, :, k + offset].reshape(-1)
    for j, code in enumerate(ds.sector_code):
        cols[schema.share_prefix + code] = ds.s_z[:, :, j].reshape(-1)
    if ds.s_x is not None:
        if not schema.regressor_share_prefix:
            raise DataError("dataset has regressor shares but the schema names no prefix")
        for j, code in enumerate(ds.sector_code):
            cols[schema.regressor_share_prefix + code] = ds.s_x[:, :, j].reshape(-1)
    pd.DataFrame(cols).to_csv(obs_path, index=False)

    if schema.shock_layout == "long":
        shock = {
            schema.shock_period: np.repeat(np.array(ds.periods, dtype=object), ds.p),
            schema.shock_sector: np.tile(ds.sector_code, T),
            schema.shock_value: ds.shock_z.reshape(-1),
        }
        if ds.shock_x is not None:
            if not schema.regressor_shock_value:
                raise DataError("dataset has regressor shocks but the schema names no column")
            shock[schema.regressor_shock_value] = ds.shock_x.reshape(-1)
        if schema.sector_cluster:
            shock[schema.sector_cluster] = np.tile(ds.sector_cluster, T)
        pd.DataFrame(shock).to_csv(shock_path, index=False)
    else:
        shock = {schema.shock_period: list(ds.periods)}
        for j, code in enumerate(ds.sector_code):
            shock[schema.shock_prefix + code] = ds.shock_z[:, j]
        if ds.shock_x is not None:
            for j, code in enumerate(ds.sector_code):
                shock[schema.regressor_shock_prefix + code] = ds.shock_x[:, j]
        pd.DataFrame(shock).to_csv(shock_path, index=False)
