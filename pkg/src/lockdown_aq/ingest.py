"""Station metadata and hourly observation ingest, daily aggregation.

The observation CSV schema (UTF-8, ``.`` decimal separator, header row)::

    station_id,timestamp,no2,pm10,pm25,o3,co,so2,ws,wd,t,rh,p,dp,pressure,situation

``timestamp`` is ISO-8601; a missing UTC offset means UTC.  Empty cells and
``NA`` are treated as absent.  The station metadata CSV schema::

    station_id,region,class_label,lat,lon
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from typing import IO, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

POLLUTANT_COLUMNS = {
    "no2": "NO2",
    "pm10": "PM10",
    "pm25": "PM2.5",
    "o3": "O3",
    "co": "CO",
    "so2": "SO2",
}
WEATHER_COLUMNS = {
    "ws": "WS",
    "wd": "WD",
    "t": "T",
    "rh": "RH",
    "p": "P",
    "dp": "DP",
    "pressure": "pressure",
}
OBSERVATION_COLUMNS = (
    ["station_id", "timestamp"]
    + list(POLLUTANT_COLUMNS)
    + list(WEATHER_COLUMNS)
    + ["situation"]
)
STATION_COLUMNS = ["station_id", "region", "class_label", "lat", "lon"]
MISSING_TOKENS = {"", "NA", "NaN", "nan", "null"}

# Station classes per region; ``None`` accepts any label.
REGION_CLASSES: dict[str, frozenset[str] | None] = {
    "EasternSwitzerland": frozenset({"No Traffic", "Low Traffic", "High Traffic"}),
    "LowerAustria": frozenset(
        {"Urban", "Rural", "Rural Residential", "Residential", "Suburban Residential"}
    ),
    "Beijing": frozenset({"Urban", "Rural", "Suburban", "Road"}),
    "Wuhan": None,
}


class IngestError(ValueError):
    pass


class MalformedHeader(IngestError):
    pass


class RowError(IngestError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


@dataclass(frozen=True)
class StationMeta:
    station_id: str
    region: str
    class_label: str
    latitude: float | None = None
    longitude: float | None = None


@dataclass(frozen=True)
class Observation:
    station_id: str
    timestamp: datetime
    pollutants: Mapping[str, float] = field(default_factory=dict)
    weather: Mapping[str, float] = field(default_factory=dict)
    situation: str | None = None


@dataclass
class ParseReport:
    n_rows: int = 0
    n_parsed: int = 0
    row_errors: list[RowError] = field(default_factory=list)
    ignored_columns: list[str] = field(default_factory=list)
    invalid_values: int = 0

    @property
    def n_skipped(self) -> int:
        return len(self.row_errors)


@dataclass
class DailySeries:
    """Daily means per field with their hourly coverage fractions.

    ``values`` and ``coverage`` share a daily ``DatetimeIndex`` named
    ``date``; absent means are NaN.
    """

    station_id: str
    values: pd.DataFrame
    coverage: pd.DataFrame
    coverage_threshold: float = 0.75

    def __post_init__(self):
        idx = self.values.index
        if not (idx.is_monotonic_increasing and idx.is_unique):
            raise ValueError("dates must be strictly increasing")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.values.index

    @property
    def fields(self) -> list[str]:
        return list(self.values.columns)

    def get(self, name: str) -> pd.Series:
        if name in self.values:
            return self.values[name]
        return pd.Series(np.nan, index=self.values.index, name=name)

    def copy(self) -> "DailySeries":
        return DailySeries(
            self.station_id, self.values.copy(), self.coverage.copy(), self.coverage_threshold
        )


def _is_missing(cell: str | None) -> bool:
    return cell is None or cell.strip() in MISSING_TOKENS


def parse_timestamp(text: str) -> datetime:
    """ISO-8601 to an aware UTC datetime truncated to the hour."""
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    ts = ts.astimezone(timezone.utc)
    return ts.replace(minute=0, second=0, microsecond=0)


def _valid(code: str, value: float) -> bool:
    if not math.isfinite(value):
        return False
    if code == "RH":
        return 0.0 <= value <= 100.0
    if code in POLLUTANT_COLUMNS.values():
        return value >= 0.0
    return True


def parse_observations(stream: IO[str] | IO[bytes] | str) -> tuple[list[Observation], ParseReport]:
    """Parse an observation CSV into ``Observation`` records.

    Malformed rows are skipped and recorded in the returned report; invalid
    individual values (negative concentrations, RH outside [0, 100]) become
    absent fields and are counted.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    else:
        peek = stream.read(0)
        if isinstance(peek, bytes):
            stream = io.TextIOWrapper(stream, encoding="utf-8", newline="")
    reader = csv.reader(stream)
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise MalformedHeader("empty input") from None
    if header and header[0].startswith("﻿"):
        header[0] = header[0][1:]
    if "station_id" not in header or "timestamp" not in header:
        raise MalformedHeader("header needs 'station_id' and 'timestamp' columns")

    report = ParseReport()
    report.ignored_columns = [h for h in header if h not in OBSERVATION_COLUMNS]
    if report.ignored_columns:
        warnings.warn(f"ignoring {len(report.ignored_columns)} unrecognized column(s)")
    col = {name: i for i, name in enumerate(header) if name in OBSERVATION_COLUMNS}

    out: list[Observation] = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        report.n_rows += 1
        if len(row) < len(header):
            row = row + [""] * (len(header) - len(row))
        sid = row[col["station_id"]].strip()
        if not sid:
            report.row_errors.append(RowError(lineno, "empty station_id"))
            continue
        try:
            ts = parse_timestamp(row[col["timestamp"]])
        except ValueError:
            report.row_errors.append(
                RowError(lineno, f"unparseable timestamp {row[col['timestamp']]!r}")
            )
            continue
        values: dict[str, float] = {}
        bad = False
        for name, code in {**POLLUTANT_COLUMNS, **WEATHER_COLUMNS}.items():
            if name not in col or _is_missing(row[col[name]]):
                continue
            try:
                v = float(row[col[name]])
            except ValueError:
                report.row_errors.append(
                    RowError(lineno, f"unparseable {name} value {row[col[name]]!r}")
                )
                bad = True
                break
            if code == "WD" and math.isfinite(v):
                v = v % 360.0
            if not _valid(code, v):
                report.invalid_values += 1
                continue
            values[code] = v
        if bad:
            continue
        situation = None
        if "situation" in col and not _is_missing(row[col["situation"]]):
            situation = row[col["situation"]].strip()
        out.append(
            Observation(
                station_id=sid,
                timestamp=ts,
                pollutants={k: v for k, v in values.items() if k in POLLUTANT_COLUMNS.values()},
                weather={k: v for k, v in values.items() if k in WEATHER_COLUMNS.values()},
                situation=situation,
            )
        )
    report.n_parsed = len(out)
    return out, report


def serialize_observations(observations: Iterable[Observation]) -> str:
    """Inverse of :func:`parse_observations` on present fields."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(OBSERVATION_COLUMNS)
    codes = {**POLLUTANT_COLUMNS, **WEATHER_COLUMNS}
    for ob in observations:
        merged = {**ob.pollutants, **ob.weather}
        row = [ob.station_id, ob.timestamp.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")]
        for name, code in codes.items():
            v = merged.get(code)
            row.append("" if v is None else repr(float(v)))
        row.append(ob.situation or "")
        writer.writerow(row)
    return buf.getvalue()


def parse_stations(stream: IO[str] | str) -> list[StationMeta]:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.DictReader(stream)
    fields = [f.strip().lower() for f in (reader.fieldnames or [])]
    if not {"station_id", "region", "class_label"} <= set(fields):
        raise MalformedHeader("station metadata needs station_id, region, class_label")
    reader.fieldnames = fields
    stations: list[StationMeta] = []
    seen: set[str] = set()
    for lineno, row in enumerate(reader, start=2):
        sid = (row.get("station_id") or "").strip()
        if not sid:
            raise RowError(lineno, "empty station_id")
        if sid in seen:
            raise RowError(lineno, f"duplicate station_id {sid!r}")
        seen.add(sid)
        region = (row.get("region") or "").strip() or "Other"
        label = (row.get("class_label") or "").strip()
        allowed = REGION_CLASSES.get(region)
        if allowed is not None and label not in allowed:
            raise RowError(lineno, f"class {label!r} not declared for region {region}")
        lat = row.get("lat")
        lon = row.get("lon")
        stations.append(
            StationMeta(
                sid,
                region,
                label,
                None if _is_missing(lat) else float(lat),
                None if _is_missing(lon) else float(lon),
            )
        )
    return stations


def _circular_mean_deg(sin_sum: pd.Series, cos_sum: pd.Series) -> pd.Series:
    length = np.hypot(sin_sum, cos_sum)
    deg = np.degrees(np.arctan2(sin_sum, cos_sum)) % 360.0
    deg = deg.where(length > 1e-9)
    # arctan2 can land on exactly 360 after the modulo for -0.0 inputs
    return deg.where(deg < 360.0, 0.0)


def aggregate_daily(
    observations: Sequence[Observation],
    coverage_threshold: float = 0.75,
    utc_offset_hours: float = 0.0,
) -> dict[str, DailySeries]:
    """Aggregate hourly observations to local-day means per station.

    A field's daily mean is kept only when the fraction of the 24 local hours
    carrying a value reaches ``coverage_threshold``.  Wind direction is
    averaged as a unit-vector mean.
    """
    if not 0.0 < coverage_threshold <= 1.0:
        raise ValueError("coverage_threshold must be in (0, 1]")
    if not observations:
        return {}
    codes = list(POLLUTANT_COLUMNS.values()) + list(WEATHER_COLUMNS.values())
    offset = timedelta(hours=utc_offset_hours)
    records = []
    for ob in observations:
        merged = {**ob.pollutants, **ob.weather}
        local = ob.timestamp.astimezone(timezone.utc) + offset
        records.append(
            [ob.station_id, ob.timestamp.timestamp(), local.date()]
            + [merged.get(c, np.nan) for c in codes]
        )
    df = pd.DataFrame(records, columns=["station_id", "hour", "date"] + codes)
    # sort on everything so float summation order never depends on input order
    df = df.sort_values(["station_id", "hour"] + codes, kind="mergesort", na_position="last")
    df = df.reset_index(drop=True)
    df["date"] = pd.to_datetime(df["date"])
    wd = np.radians(df["WD"])
    df["_wd_sin"] = np.sin(wd)
    df["_wd_cos"] = np.cos(wd)

    result: dict[str, DailySeries] = {}
    for sid, grp in df.groupby("station_id", sort=True):
        g = grp.groupby("date", sort=True)
        means = g[codes].mean()
        means["WD"] = _circular_mean_deg(g["_wd_sin"].sum(), g["_wd_cos"].sum())
        cov = pd.DataFrame(index=means.index)
        for c in codes:
            hours = grp["hour"].where(grp[c].notna())
            cov[c] = (hours.groupby(grp["date"]).nunique() / 24.0).clip(upper=1.0)
        cov = cov.reindex(means.index).fillna(0.0)
        means = means.where(cov >= coverage_threshold)
        means.index.name = cov.index.name = "date"
        present = [c for c in codes if cov[c].gt(0).any()]
        result[str(sid)] = DailySeries(
            str(sid), means[present].copy(), cov[present].copy(), coverage_threshold
        )
    return result


def slice_period(series: DailySeries, start: date, end: date) -> DailySeries:
    """Rows with ``start <= date <= end``."""
    if start > end:
        raise ValueError("start must not be after end")
    lo, hi = pd.Timestamp(start), pd.Timestamp(end)
    mask = (series.dates >= lo) & (series.dates <= hi)
    return DailySeries(
        series.station_id,
        series.values.loc[mask].copy(),
        series.coverage.loc[mask].copy(),
        series.coverage_threshold,
    )


def daily_series_from_frame(
    station_id: str, frame: pd.DataFrame, coverage_threshold: float = 0.75
) -> DailySeries:
    """Wrap an already-daily frame (coverage 1 where present)."""
    values = frame.copy()
    values.index = pd.DatetimeIndex(values.index).normalize()
    values.index.name = "date"
    coverage = values.notna().astype(float)
    return DailySeries(station_id, values, coverage, coverage_threshold)
