"""Panel dataset handling: strict CSV ingestion for hourly series and the
calendar covariates derived from timestamps."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

from .errors import DataError

HOUR = timedelta(hours=1)
CSV_HEADER = ["item_id", "timestamp", "target"]
COVARIATE_DIM = 4


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator; (seed, stream) pairs give independent,
    reproducible streams."""
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def time_features(start: datetime, length: int) -> np.ndarray:
    """(length, 4) matrix of hour-of-day and day-of-week phases as (sin, cos)
    pairs. The day-of-week phase advances continuously with the hour so the
    weekly column is smooth for hourly data."""
    out = np.empty((length, COVARIATE_DIM))
    for t in range(length):
        ts = start + t * HOUR
        hour_phase = 2.0 * np.pi * ts.hour / 24.0
        week_phase = 2.0 * np.pi * (ts.weekday() * 24.0 + ts.hour) / 168.0
        out[t] = (np.sin(hour_phase), np.cos(hour_phase),
                  np.sin(week_phase), np.cos(week_phase))
    return out


@dataclass
class Series:
    item_id: str
    start: datetime
    targets: np.ndarray
    covariates: np.ndarray

    @classmethod
    def from_targets(cls, item_id: str, start: datetime, targets) -> "Series":
        targets = np.asarray(targets, dtype=np.float64)
        return cls(item_id, start, targets, time_features(start, len(targets)))

    @property
    def length(self) -> int:
        return len(self.targets)

    def timestamps(self) -> list[datetime]:
        return [self.start + t * HOUR for t in range(self.length)]

    def future_timestamps(self, horizon: int) -> list[datetime]:
        return [self.start + (self.length + t) * HOUR for t in range(horizon)]

    def future_covariates(self, horizon: int) -> np.ndarray:
        """Calendar covariates for the steps immediately after the series."""
        full = time_features(self.start, self.length + horizon)
        return full[self.length:]


class TimeSeriesDataset:
    """An immutable collection of aligned (covariates, observations) series."""

    def __init__(self, series: list[Series]):
        ids = [s.item_id for s in series]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate item_id in dataset")
        for s in series:
            if s.length < 1:
                raise DataError(f"series {s.item_id!r} is empty")
            if not np.all(np.isfinite(s.covariates)):
                raise DataError(f"series {s.item_id!r} has non-finite covariates")
        self.series = list(series)
        self._index = {s.item_id: s for s in self.series}

    def __len__(self) -> int:
        return len(self.series)

    def __iter__(self):
        return iter(self.series)

    @property
    def ids(self) -> list[str]:
        return [s.item_id for s in self.series]

    def get(self, item_id: str) -> Series:
        if item_id not in self._index:
            raise DataError(f"unknown series id {item_id!r}")
        return self._index[item_id]

    def alignment_key(self, item_id: str) -> tuple:
        s = self.get(item_id)
        return (s.start, s.length)

    def slice_time(self, start: int, stop: int) -> "TimeSeriesDataset":
        """Sub-window [start, stop) of every series, covariates re-derived."""
        out = []
        for s in self.series:
            if stop > s.length or start < 0 or start >= stop:
                raise DataError(f"window [{start}, {stop}) out of range for series {s.item_id!r}")
            out.append(Series.from_targets(s.item_id, s.start + start * HOUR, s.targets[start:stop]))
        return TimeSeriesDataset(out)

    def scale_by_mean(self) -> tuple["TimeSeriesDataset", dict]:
        """Optional per-series mean scaling: divide targets by mean(|z|) + 1."""
        scaled, scales = [], {}
        for s in self.series:
            scale = float(np.mean(np.abs(s.targets)) + 1.0)
            scales[s.item_id] = scale
            scaled.append(Series(s.item_id, s.start, s.targets / scale, s.covariates))
        return TimeSeriesDataset(scaled), scales


def _parse_timestamp(raw: str, line_no: int) -> datetime:
    try:
        return datetime.fromisoformat(raw)
    except ValueError:
        raise DataError(f"line {line_no}: malformed timestamp {raw!r}")


def load_csv(path) -> TimeSeriesDataset:
    """Read a `item_id,timestamp,target` CSV with hourly, gap-free series whose
    rows are grouped per id in time order."""
    series: list[Series] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file")
        if header != CSV_HEADER:
            raise DataError(f"{path}: expected header {','.join(CSV_HEADER)!r}, got {','.join(header)!r}")
        cur_id = None
        cur_start = None
        cur_prev = None
        cur_targets: list[float] = []

        def flush():
            if cur_id is not None:
                series.append(Series.from_targets(cur_id, cur_start, cur_targets))

        for line_no, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataError(f"line {line_no}: expected 3 fields, got {len(row)}")
            item_id, raw_ts, raw_target = row
            ts = _parse_timestamp(raw_ts, line_no)
            try:
                target = float(raw_target)
            except ValueError:
                raise DataError(f"line {line_no}: malformed target {raw_target!r}")
            if item_id != cur_id:
                if item_id in seen:
                    raise DataError(f"line {line_no}: rows for series {item_id!r} are not grouped")
                flush()
                seen.add(item_id)
                cur_id, cur_start, cur_prev, cur_targets = item_id, ts, ts, [target]
                continue
            expected = cur_prev + HOUR
            if ts == cur_prev:
                raise DataError(f"line {line_no}: duplicate timestamp {ts.isoformat()} in series {item_id!r}")
            if ts < cur_prev:
                raise DataError(f"line {line_no}: non-monotone timestamp in series {item_id!r}")
            if ts != expected:
                raise DataError(
                    f"line {line_no}: series {item_id!r} is missing timestamp {expected.isoformat()}"
                )
            cur_prev = ts
            cur_targets.append(target)
        flush()
    if not series:
        raise DataError(f"{path}: no data rows")
    return TimeSeriesDataset(series)


def write_csv(dataset: TimeSeriesDataset, path) -> None:
    """Write the dataset in the load_csv schema; targets round-trip bit-exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for s in dataset:
            for ts, z in zip(s.timestamps(), s.targets):
                writer.writerow([s.item_id, ts.isoformat(), repr(float(z))])
