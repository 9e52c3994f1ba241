"""Cleaning (detrend, min-max, standard scaling) and flat-window encoding."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadShape, NoWindows, SchemaMismatch, TooShort, UnknownColumn
from .ingest import FeatureTable, ObservationKey, WarningLabel, WarningLabelSet

PRICE_COLUMN = "local_price"
FUTURES_COLUMN = "futures_price"
# columns that are genuine monthly time series; the rest are annual/static
DETREND_COLUMNS = ("local_price", "futures_price", "global_price_index")
STEP_ORDER = "detrend>minmax"


def fit_line(t: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares ``y = intercept + slope * t``."""
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    tc = t - t.mean()
    denom = float(tc @ tc)
    slope = float(tc @ (y - y.mean()) / denom) if denom > 0 else 0.0
    intercept = float(y.mean() - slope * t.mean())
    return slope, intercept


def detrend_linear(series: Sequence[float]) -> tuple[np.ndarray, float, float]:
    y = np.asarray(series, dtype=np.float64)
    if y.size < 2:
        raise TooShort(f"detrending needs at least 2 points, got {y.size}")
    t = np.arange(y.size, dtype=np.float64)
    slope, intercept = fit_line(t, y)
    return y - (intercept + slope * t), slope, intercept


@dataclass(frozen=True)
class ColumnStats:
    """Fitted statistics of one column.

    ``min``/``max``/``mean``/``std`` describe the column after detrending
    (if any). ``trends`` maps each (country, commodity) series to its fitted
    line; it is empty for columns that are not detrended.
    """

    min: float
    max: float
    mean: float
    std: float
    constant: bool = False
    trends: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.max < self.min or self.std < 0:
            raise ValueError("invalid column statistics")


@dataclass(frozen=True)
class SeriesTrend:
    slope: float
    intercept: float
    origin: int  # month ordinal where t = 0

    def at(self, key: ObservationKey) -> float:
        return self.intercept + self.slope * (key.ordinal - self.origin)


def normalize_minmax(column: Sequence[float]) -> tuple[np.ndarray, ColumnStats]:
    x = np.asarray(column, dtype=np.float64)
    if x.size == 0:
        raise TooShort("cannot normalize an empty column")
    lo, hi = float(x.min()), float(x.max())
    stats = ColumnStats(lo, hi, float(x.mean()), float(x.std()), constant=hi == lo)
    if stats.constant:
        return np.zeros_like(x), stats
    return (x - lo) / (hi - lo), stats


def scale_standard(column: Sequence[float]) -> tuple[np.ndarray, ColumnStats]:
    x = np.asarray(column, dtype=np.float64)
    if x.size < 2:
        raise TooShort(f"standard scaling needs at least 2 values, got {x.size}")
    mu, sd = float(x.mean()), float(x.std())
    stats = ColumnStats(float(x.min()), float(x.max()), mu, sd, constant=sd == 0.0)
    if stats.constant:
        return np.zeros_like(x), stats
    return (x - mu) / sd, stats


@dataclass(frozen=True)
class CleaningRecipe:
    feature_names: tuple[str, ...]
    columns: dict[str, ColumnStats]
    step_order: str = STEP_ORDER

    def to_dict(self) -> dict:
        cols = {}
        for name, st in self.columns.items():
            cols[name] = {
                "min": st.min, "max": st.max, "mean": st.mean, "std": st.std,
                "constant": st.constant,
                "trends": [
                    [c, k, tr.slope, tr.intercept, tr.origin] for (c, k), tr in sorted(st.trends.items())
                ],
            }
        return {"feature_names": list(self.feature_names), "step_order": self.step_order, "columns": cols}

    @classmethod
    def from_dict(cls, d: dict) -> "CleaningRecipe":
        cols = {}
        for name, st in d["columns"].items():
            trends = {(c, k): SeriesTrend(s, i, o) for c, k, s, i, o in st["trends"]}
            cols[name] = ColumnStats(st["min"], st["max"], st["mean"], st["std"], st["constant"], trends)
        return cls(tuple(d["feature_names"]), cols, d["step_order"])


def fit_recipe(table: FeatureTable, detrend_columns: Sequence[str] = DETREND_COLUMNS) -> CleaningRecipe:
    """Fit per-series linear trends (time-varying columns), then global min-max."""
    if len(table) == 0:
        raise TooShort("cannot fit a recipe on an empty table")
    groups = table.series()
    columns = {}
    for j, name in enumerate(table.feature_names):
        trends = {}
        if name in detrend_columns:
            resid = []
            for sid, keys in groups.items():
                y = np.array([table.rows[k][j] for k in keys])
                origin = keys[0].ordinal
                t = np.array([k.ordinal - origin for k in keys], dtype=np.float64)
                slope, intercept = fit_line(t, y) if len(keys) >= 2 else (0.0, float(y[0]))
                trends[sid] = SeriesTrend(slope, intercept, origin)
                resid.append(y - (intercept + slope * t))
            values = np.concatenate(resid)
        else:
            values = np.array([table.rows[k][j] for g in groups.values() for k in g])
        _, st = normalize_minmax(values)
        columns[name] = ColumnStats(st.min, st.max, st.mean, st.std, st.constant, trends)
    return CleaningRecipe(table.feature_names, columns)


def _clean_value(st: ColumnStats, key: ObservationKey, x: float) -> float:
    if st.trends:
        trend = st.trends.get(key.series)
        if trend is None:
            raise SchemaMismatch(f"recipe has no trend for series {key.series}")
        x = x - trend.at(key)
    if st.constant:
        return 0.0
    return (x - st.min) / (st.max - st.min)


def apply_recipe(recipe: CleaningRecipe, table: FeatureTable) -> FeatureTable:
    """Clean with stored statistics; out-of-range values pass through unclipped."""
    if tuple(table.feature_names) != recipe.feature_names:
        raise SchemaMismatch(f"recipe fitted on {recipe.feature_names}, table has {table.feature_names}")
    stats = [recipe.columns[name] for name in recipe.feature_names]
    rows = {
        key: np.array([_clean_value(st, key, float(x)) for st, x in zip(stats, vec)])
        for key, vec in table.rows.items()
    }
    return FeatureTable(table.feature_names, rows)


def invert_value(recipe: CleaningRecipe, column: str, key: ObservationKey, cleaned: float) -> float:
    st = recipe.columns.get(column)
    if st is None:
        raise UnknownColumn(f"recipe has no column {column!r}")
    x = st.min if st.constant else cleaned * (st.max - st.min) + st.min
    if st.trends:
        trend = st.trends.get(key.series)
        if trend is None:
            raise SchemaMismatch(f"recipe has no trend for series {key.series}")
        x += trend.at(key)
    return float(x)


def invert_price(recipe: CleaningRecipe, key: ObservationKey, cleaned_price: float) -> float:
    """Map a cleaned local price at ``key`` back to raw currency units."""
    return invert_value(recipe, PRICE_COLUMN, key, cleaned_price)


# ---------------------------------------------------------------------------
# flat windows


@dataclass(frozen=True)
class FlatWindow:
    """Input vector ``[static at t] ++ [m prices] ++ [m futures]`` for time ``key``."""

    key: ObservationKey
    features: np.ndarray
    target_price: float | None
    target_label: WarningLabel | None
    last_price: float

    @property
    def length(self) -> int:
        return self.features.size


def flat_length(n: int, m: int) -> int:
    return n - 2 + 2 * m


def reduction_factor(n: int, m: int) -> tuple[Fraction, float]:
    """Input-size reduction ``m*n / (n - 2 + 2m)`` of a flat window over an ``[m, n]`` block."""
    if n < 3:
        raise BadShape(f"need n >= 3 features, got {n}")
    if m < 1:
        raise BadShape(f"need m >= 1, got {m}")
    r = Fraction(m * n, flat_length(n, m))
    return r, float(r)


def build_windows(
    table: FeatureTable,
    labels: WarningLabelSet | None,
    m: int,
    h: int,
    price_column: str = PRICE_COLUMN,
    futures_column: str = FUTURES_COLUMN,
    require_target: bool = True,
) -> list[FlatWindow]:
    """One window per series and month ``t`` with months ``t-m+1..t`` all present.

    With ``require_target`` the month ``t+h`` must be present too and supplies
    the targets; otherwise every eligible ``t`` is kept and targets may be None.
    """
    if m < 1 or h < 1:
        raise BadShape(f"need m >= 1 and h >= 1, got m={m}, h={h}")
    pi, fi = table.index(price_column), table.index(futures_column)
    static = [j for j in range(table.n) if j not in (pi, fi)]
    out = []
    for keys in table.series().values():
        by_ord = {k.ordinal: k for k in keys}
        for key in keys:
            t = key.ordinal
            hist = [by_ord.get(t - m + 1 + i) for i in range(m)]
            if any(k is None for k in hist):
                continue
            target_key = by_ord.get(t + h)
            if target_key is None and require_target:
                continue
            rows = [table.rows[k] for k in hist]
            vec = np.concatenate([
                table.rows[key][static],
                [r[pi] for r in rows],
                [r[fi] for r in rows],
            ])
            target = None if target_key is None else float(table.rows[target_key][pi])
            label = None
            if labels is not None and target_key is not None:
                label = labels.get(target_key)
            out.append(FlatWindow(key, vec, target, label, float(rows[-1][pi])))
    if not out:
        raise NoWindows(f"no series has {m} contiguous months followed by a month at +{h}")
    return out


def split_windows(windows: Sequence[FlatWindow], train_frac: float = 0.8):
    """Chronological per-series split; the first ``train_frac`` of each series trains."""
    groups: dict[tuple[str, str], list[FlatWindow]] = {}
    for w in sorted(windows, key=lambda w: w.key):
        groups.setdefault(w.key.series, []).append(w)
    train, test = [], []
    for ws in groups.values():
        cut = int(len(ws) * train_frac)
        train.extend(ws[:cut])
        test.extend(ws[cut:])
    return train, test


def split_table(table: FeatureTable, train_frac: float = 0.8) -> tuple[FeatureTable, FeatureTable]:
    """Chronological per-series split of the table's months."""
    train, test = [], []
    for keys in table.series().values():
        cut = int(len(keys) * train_frac)
        train.extend(keys[:cut])
        test.extend(keys[cut:])
    return table.subset(train), table.subset(test)


def windows_to_csv(windows: Sequence[FlatWindow], path: str | Path):
    width = max((w.length for w in windows), default=0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["country", "commodity", "month", *[f"w{i}" for i in range(width)], "target", "label"])
        for w in windows:
            wr.writerow([
                w.key.country, w.key.commodity, w.key.month_str,
                *map(repr, w.features.tolist()),
                "" if w.target_price is None else repr(float(w.target_price)),
                "" if w.target_label is None else w.target_label.name.lower(),
            ])


def windows_from_csv(path: str | Path) -> list[tuple[ObservationKey, np.ndarray, float | None, WarningLabel | None]]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for rec in reader:
            key = ObservationKey.parse(rec[0], rec[1], rec[2])
            vec = np.array([float(v) for v in rec[3:-2]])
            target = float(rec[-2]) if rec[-2] else None
            label = WarningLabel.parse(rec[-1]) if rec[-1] else None
            out.append((key, vec, target, label))
    return out
