"""Source CSV parsing and the complete-sample join."""

from __future__ import annotations

import csv
import enum
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import BadDate, BadNumber, DataError, DuplicateKey, MissingColumn, NoOverlap, SchemaMismatch, UnknownSeverity

DEFAULT_FEATURES = (
    "proteus_index",
    "local_price",
    "global_price_index",
    "harvest_quantity",
    "outlook_demand",
    "futures_price",
    "ifs_indicator",
)
DATE_FORMATS = ("YYYY-MM", "YYYY-MM-DD", "MM/YYYY")

_DATE_PATTERNS = {
    "YYYY-MM": re.compile(r"^(\d{4})-(\d{1,2})$"),
    "YYYY-MM-DD": re.compile(r"^(\d{4})-(\d{1,2})-(\d{1,2})$"),
    "MM/YYYY": re.compile(r"^(\d{1,2})/(\d{4})$"),
}


@dataclass(frozen=True, order=True)
class ObservationKey:
    country: str
    commodity: str
    year: int
    month: int

    def __post_init__(self):
        if not self.country or not self.commodity:
            raise ValueError("country and commodity must be non-empty")
        object.__setattr__(self, "country", self.country.strip().upper())
        object.__setattr__(self, "commodity", self.commodity.strip().upper())
        if not 1 <= self.month <= 12 or not 1900 <= self.year <= 2100:
            raise BadDate(f"month out of range: {self.year}-{self.month}")

    @property
    def ordinal(self) -> int:
        """Months since year 0; consecutive months differ by exactly 1."""
        return self.year * 12 + self.month - 1

    @property
    def series(self) -> tuple[str, str]:
        return (self.country, self.commodity)

    @property
    def month_str(self) -> str:
        return f"{self.year:04d}-{self.month:02d}"

    def shift(self, months: int) -> "ObservationKey":
        o = self.ordinal + months
        return ObservationKey(self.country, self.commodity, o // 12, o % 12 + 1)

    @classmethod
    def parse(cls, country: str, commodity: str, month: str, fmt: str = "YYYY-MM") -> "ObservationKey":
        year, mon = parse_date(month, fmt)
        return cls(country, commodity, year, mon)


def parse_date(text: str, fmt: str) -> tuple[int, int]:
    if fmt not in _DATE_PATTERNS:
        raise BadDate(f"unsupported date format {fmt!r}; expected one of {DATE_FORMATS}")
    m = _DATE_PATTERNS[fmt].match(text.strip())
    if not m:
        raise BadDate(f"cannot parse {text!r} as {fmt}")
    if fmt == "MM/YYYY":
        mon, year = int(m.group(1)), int(m.group(2))
    else:
        year, mon = int(m.group(1)), int(m.group(2))
        if fmt == "YYYY-MM-DD" and not 1 <= int(m.group(3)) <= 31:
            raise BadDate(f"day out of range in {text!r}")
    if not 1 <= mon <= 12 or not 1900 <= year <= 2100:
        raise BadDate(f"date out of range: {text!r}")
    return year, mon


@dataclass(frozen=True)
class SourceSchema:
    source_name: str
    value_column: str
    country_column: str = "country"
    commodity_column: str = "commodity"
    date_column: str = "date"
    date_format: str = "YYYY-MM"
    annual: bool = False

    def __post_init__(self):
        if self.value_column in self.key_columns:
            raise SchemaMismatch(f"{self.source_name}: value column overlaps key columns")
        if self.date_format not in DATE_FORMATS:
            raise SchemaMismatch(f"{self.source_name}: unknown date format {self.date_format!r}")

    @property
    def key_columns(self) -> tuple[str, str, str]:
        return (self.country_column, self.commodity_column, self.date_column)


@dataclass
class RawSeries:
    source_name: str
    points: dict[ObservationKey, float] = field(default_factory=dict)

    def __len__(self):
        return len(self.points)


def load_source(path: str | Path, schema: SourceSchema) -> RawSeries:
    """Read one source CSV into a keyed series.

    Annual sources carry one value per year, which is forward-filled over
    all twelve months of that year.
    """
    out = RawSeries(schema.source_name)
    seen_years: set[tuple[str, str, int]] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (*schema.key_columns, schema.value_column):
            if col not in header:
                raise MissingColumn(f"{path}: column {col!r} not in header {header}")
        for lineno, row in enumerate(reader, start=2):
            country, commodity = row[schema.country_column], row[schema.commodity_column]
            if not (country and country.strip() and commodity and commodity.strip()):
                raise DataError(f"{path}:{lineno}: empty country or commodity")
            key = ObservationKey.parse(country, commodity, row[schema.date_column] or "", schema.date_format)
            cell = (row[schema.value_column] or "").strip()
            try:
                value = float(cell)
            except ValueError:
                raise BadNumber(f"{path}:{lineno}: cannot parse {cell!r} as a number") from None
            if not math.isfinite(value):
                raise BadNumber(f"{path}:{lineno}: non-finite value {cell!r}")
            if schema.annual:
                year_key = (key.country, key.commodity, key.year)
                if year_key in seen_years:
                    raise DuplicateKey(f"{path}:{lineno}: second value for {year_key} in annual source")
                seen_years.add(year_key)
                for mon in range(1, 13):
                    out.points[ObservationKey(key.country, key.commodity, key.year, mon)] = value
                continue
            if key in out.points:
                raise DuplicateKey(f"{path}:{lineno}: duplicate key {key}")
            out.points[key] = value
    return out


def write_source(series: RawSeries, path: str | Path, value_column: str = "value"):
    """Write a series in the default ``country,commodity,date,value`` layout."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["country", "commodity", "date", value_column])
        for key in sorted(series.points):
            w.writerow([key.country, key.commodity, key.month_str, repr(float(series.points[key]))])


@dataclass
class FeatureTable:
    feature_names: tuple[str, ...]
    rows: dict[ObservationKey, np.ndarray]

    def __post_init__(self):
        self.feature_names = tuple(self.feature_names)
        if len(set(self.feature_names)) != len(self.feature_names):
            raise SchemaMismatch(f"duplicate feature names in {self.feature_names}")
        n = len(self.feature_names)
        for key, vec in self.rows.items():
            if vec.shape != (n,) or not np.all(np.isfinite(vec)):
                raise SchemaMismatch(f"row {key} must hold {n} finite values")

    def __len__(self):
        return len(self.rows)

    @property
    def n(self) -> int:
        return len(self.feature_names)

    def index(self, name: str) -> int:
        try:
            return self.feature_names.index(name)
        except ValueError:
            raise SchemaMismatch(f"table has no column {name!r}") from None

    def series(self) -> dict[tuple[str, str], list[ObservationKey]]:
        """Keys grouped by (country, commodity), each group in time order."""
        groups: dict[tuple[str, str], list[ObservationKey]] = {}
        for key in sorted(self.rows):
            groups.setdefault(key.series, []).append(key)
        return groups

    def subset(self, keys: Iterable[ObservationKey]) -> "FeatureTable":
        return FeatureTable(self.feature_names, {k: self.rows[k] for k in keys})

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["country", "commodity", "month", *self.feature_names])
            for key in sorted(self.rows):
                w.writerow([key.country, key.commodity, key.month_str, *(repr(float(v)) for v in self.rows[key])])

    @classmethod
    def from_csv(cls, path: str | Path) -> "FeatureTable":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:3] != ["country", "commodity", "month"]:
                raise MissingColumn(f"{path}: expected country,commodity,month leading columns")
            names = header[3:]
            rows = {}
            for lineno, rec in enumerate(reader, start=2):
                key = ObservationKey.parse(rec[0], rec[1], rec[2])
                try:
                    rows[key] = np.array([float(v) for v in rec[3:]], dtype=np.float64)
                except ValueError:
                    raise BadNumber(f"{path}:{lineno}: unparseable value") from None
        return cls(tuple(names), rows)


def join_complete(sources: Sequence[RawSeries], feature_names: Sequence[str]) -> FeatureTable:
    """Keep only keys present in every source; columns follow ``feature_names``."""
    if not sources:
        raise NoOverlap("no sources given")
    if len(sources) != len(feature_names):
        raise SchemaMismatch(f"{len(sources)} sources for {len(feature_names)} feature names")
    common = set(sources[0].points)
    for s in sources[1:]:
        common &= s.points.keys()
    if not common:
        counts = ", ".join(f"{s.source_name}={len(s)}" for s in sources)
        raise NoOverlap(f"no key is present in every source (keys per source: {counts})")
    rows = {
        key: np.array([s.points[key] for s in sources], dtype=np.float64)
        for key in sorted(common)
    }
    return FeatureTable(tuple(feature_names), rows)


class WarningLabel(enum.IntEnum):
    NONE = 0
    MODERATE = 1
    HIGH = 2

    @classmethod
    def parse(cls, text: str) -> "WarningLabel":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise UnknownSeverity(f"unknown severity {text!r}; expected none, moderate or high") from None

    @property
    def title(self) -> str:
        return {0: "None", 1: "Moderate", 2: "High"}[int(self)]


@dataclass
class WarningLabelSet:
    labels: dict[ObservationKey, WarningLabel] = field(default_factory=dict)

    def get(self, key: ObservationKey) -> WarningLabel:
        return self.labels.get(key, WarningLabel.NONE)

    def __len__(self):
        return len(self.labels)

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["country", "commodity", "month", "severity"])
            for key in sorted(self.labels):
                w.writerow([key.country, key.commodity, key.month_str, self.labels[key].name.lower()])


def load_warnings(path: str | Path) -> WarningLabelSet:
    out = WarningLabelSet()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ("country", "commodity", "month", "severity"):
            if col not in header:
                raise MissingColumn(f"{path}: column {col!r} not in header {header}")
        for row in reader:
            key = ObservationKey.parse(row["country"], row["commodity"], row["month"])
            label = WarningLabel.parse(row["severity"])
            if key in out.labels:
                raise DuplicateKey(f"{path}: duplicate warning key {key}")
            if label is not WarningLabel.NONE:
                out.labels[key] = label
    return out


def table_from_columns(columns: Mapping[str, Mapping[ObservationKey, float]]) -> FeatureTable:
    """Build a table straight from per-column point maps (complete keys only)."""
    names = list(columns)
    return join_complete([RawSeries(n, dict(columns[n])) for n in names], names)
