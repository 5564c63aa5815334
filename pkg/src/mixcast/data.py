"""CSV ingestion, train-only standardization, chronological splits, and
sliding-window pair generation.

Windows are (X: [V, T], Y: [V, H]) pairs cut with stride 1.  Validation and
test windows may reach back up to T rows into the preceding split for
context; standardization statistics come from the train range only.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T

DATASET_KINDS = ("etth", "ettm", "generic")

# 12/4/4 months of hourly (and quarter-hourly) samples.
_ETTH_BOUNDS = (8640, 8640 + 2880, 8640 + 2880 + 2880)
_ETTM_BOUNDS = (34560, 34560 + 11520, 34560 + 11520 + 11520)

_TIMESTAMP_RE = re.compile(r"^\d{4}-\d{2}-\d{2}([ T]\d{2}:\d{2}(:\d{2})?)?$")


class DataError(ValueError):
    """Raised for malformed input files or impossible split/window requests."""


@dataclass
class RawSeries:
    names: list[str]
    values: np.ndarray          # [L_total, V], time-ordered
    timestamps: list[str]

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def num_variates(self) -> int:
        return self.values.shape[1]


@dataclass
class SplitSpec:
    train_range: tuple[int, int]
    val_range: tuple[int, int]
    test_range: tuple[int, int]

    def range_for(self, which: str) -> tuple[int, int]:
        try:
            return getattr(self, f"{which}_range")
        except AttributeError:
            raise DataError(f"unknown split {which!r}") from None


@dataclass
class StandardizationStats:
    mean: np.ndarray  # per variate, train range only
    std: np.ndarray   # per variate, population convention


@dataclass
class WindowedDataset:
    """Sliding (X, Y) windows over one contiguous row range."""

    values: np.ndarray
    start: int
    stop: int
    lookback: int
    horizon: int

    def __post_init__(self):
        usable = self.stop - self.start
        if usable < self.lookback + self.horizon:
            raise DataError(
                f"range of {usable} rows cannot fit lookback {self.lookback} "
                f"+ horizon {self.horizon}"
            )

    def __len__(self) -> int:
        return (self.stop - self.start) - self.lookback - self.horizon + 1

    def window(self, i: int):
        """(X [V,T], Y [V,H]) for window i, in the engine's default dtype."""
        if not 0 <= i < len(self):
            raise IndexError(f"window {i} out of range (n={len(self)})")
        s = self.start + i
        dtype = T.default_dtype()
        x = np.ascontiguousarray(self.values[s:s + self.lookback].T, dtype=dtype)
        y = np.ascontiguousarray(
            self.values[s + self.lookback:s + self.lookback + self.horizon].T,
            dtype=dtype)
        return x, y

    def batch(self, indices):
        """Stack windows into (xs [B,V,T], ys [B,V,H])."""
        xs, ys = zip(*(self.window(i) for i in indices))
        return np.stack(xs), np.stack(ys)

    def __iter__(self):
        return (self.window(i) for i in range(len(self)))


def load_csv(path) -> RawSeries:
    """Parse a header-bearing CSV whose first column is a timestamp and whose
    remaining columns are numeric variates."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(header) < 2:
            raise DataError(f"{path}: need a timestamp column plus at least one variate")
        names = [h.strip() for h in header[1:]]
        width = len(header)
        timestamps: list[str] = []
        rows: list[list[float]] = []
        for r, row in enumerate(reader, start=2):
            if len(row) != width:
                raise DataError(f"{path}: row {r} has {len(row)} cells, expected {width}")
            timestamps.append(row[0])
            parsed = []
            for c, cell in enumerate(row[1:], start=2):
                text = cell.strip()
                if not text:
                    raise DataError(f"{path}: blank cell at row {r}, column {c}")
                try:
                    parsed.append(float(text))
                except ValueError:
                    raise DataError(
                        f"{path}: unparsable cell {cell!r} at row {r}, column {c}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise DataError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64)
    if timestamps and all(_TIMESTAMP_RE.match(t.strip()) for t in timestamps):
        ordered = all(a <= b for a, b in zip(timestamps, timestamps[1:]))
        if not ordered:
            raise DataError(f"{path}: timestamps are not in chronological order")
    return RawSeries(names=names, values=values, timestamps=timestamps)


def chronological_split(total_rows: int, dataset_kind: str) -> SplitSpec:
    """Fixed boundaries for the ETT conventions, 70/10/20 otherwise."""
    if dataset_kind not in DATASET_KINDS:
        raise DataError(f"unknown dataset kind {dataset_kind!r}")
    if dataset_kind == "etth":
        bounds = _ETTH_BOUNDS
    elif dataset_kind == "ettm":
        bounds = _ETTM_BOUNDS
    else:
        n_train = int(total_rows * 0.7)
        n_val = int(total_rows * 0.1)
        if n_train < 1 or n_val < 1 or total_rows - n_train - n_val < 1:
            raise DataError(f"{total_rows} rows are too few for a 70/10/20 split")
        return SplitSpec((0, n_train), (n_train, n_train + n_val),
                         (n_train + n_val, total_rows))
    if total_rows < bounds[2]:
        raise DataError(
            f"{dataset_kind} split needs at least {bounds[2]} rows, got {total_rows}"
        )
    return SplitSpec((0, bounds[0]), (bounds[0], bounds[1]), (bounds[1], bounds[2]))


def standardize(raw: RawSeries, split: SplitSpec):
    """Per-variate (x - mean_train) / std_train over the whole series."""
    lo, hi = split.train_range
    if hi <= lo:
        raise DataError("empty train range")
    train = raw.values[lo:hi]
    mean = train.mean(axis=0)
    std = train.std(axis=0)  # population
    for v, s in enumerate(std):
        if s == 0.0:
            raise DataError(f"variate {raw.names[v]!r} has zero train variance")
    values = (raw.values - mean) / std
    out = RawSeries(names=list(raw.names), values=values,
                    timestamps=list(raw.timestamps))
    return out, StandardizationStats(mean=mean, std=std)


def window_iter(series, split_range: tuple[int, int], lookback: int,
                horizon: int) -> WindowedDataset:
    """All stride-1 windows whose X and Y both fall inside the given range."""
    values = series.values if isinstance(series, RawSeries) else np.asarray(series)
    start, stop = split_range
    if not 0 <= start < stop <= values.shape[0]:
        raise DataError(f"range {split_range} out of bounds for {values.shape[0]} rows")
    return WindowedDataset(values=values, start=start, stop=stop,
                           lookback=lookback, horizon=horizon)


def windows_for_split(series, spec: SplitSpec, which: str, lookback: int,
                      horizon: int) -> WindowedDataset:
    """Windows for one split; val/test ranges gain the standard lookback
    overhang into the preceding rows."""
    start, stop = spec.range_for(which)
    if which in ("val", "test"):
        start = max(0, start - lookback)
    return window_iter(series, (start, stop), lookback, horizon)
