"""Power time series: ingestion, resampling, alignment, activation masks.

All series live on an absolute grid anchored at epoch 0 (sample i sits at
``start_epoch + i * period`` with ``start_epoch`` a multiple of the period),
so any two series with equal periods are index-alignable. Power is watts
and non-negative after cleaning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, EmptyInputError, NoOverlapError

ON_THRESHOLD_W = 20.0     # strict: a sample is ON iff power > threshold
MIN_ON_S = 60.0           # ON runs strictly shorter are removed
BRIDGE_GAP_S = 300.0      # OFF gaps strictly shorter, ON on both sides, are bridged
MAX_FILL_GAP_S = 300.0    # data gaps up to this long are forward-filled


@dataclass
class TimeSeries:
    """Uniformly sampled power signal.

    ``gap_mask`` marks samples that were zero-filled across data gaps too
    long to forward-fill; windows overlapping them are unusable.
    """

    start_epoch: float
    period: float
    values: np.ndarray
    gap_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.period <= 0:
            raise DataError(f"period must be positive, got {self.period}")
        self.values = np.asarray(self.values, dtype=np.float64)

    def __len__(self):
        return len(self.values)

    @property
    def end_epoch(self) -> float:
        return self.start_epoch + len(self.values) * self.period

    def times(self) -> np.ndarray:
        return self.start_epoch + np.arange(len(self.values)) * self.period

    def has_gaps(self) -> bool:
        return self.gap_mask is not None and bool(self.gap_mask.any())

    def slice(self, i0: int, i1: int) -> "TimeSeries":
        gm = None if self.gap_mask is None else self.gap_mask[i0:i1].copy()
        return TimeSeries(self.start_epoch + i0 * self.period, self.period,
                          self.values[i0:i1].copy(), gm)

    def slice_time(self, t0: float, t1: float) -> "TimeSeries":
        """Samples with time in [t0, t1)."""
        i0 = max(0, int(math.ceil((t0 - self.start_epoch) / self.period - 1e-9)))
        i1 = min(len(self.values),
                 int(math.ceil((t1 - self.start_epoch) / self.period - 1e-9)))
        if i1 <= i0:
            raise EmptyInputError(f"time slice [{t0}, {t1}) selects no samples")
        return self.slice(i0, i1)


@dataclass
class ActivationMask:
    period: float
    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=np.uint8)

    def __len__(self):
        return len(self.bits)


@dataclass
class OnIntervalSet:
    """Sorted, disjoint, maximal half-open [start, end) index intervals."""

    intervals: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self):
        return len(self.intervals)

    def __iter__(self):
        return iter(self.intervals)

    def to_bits(self, length: int) -> np.ndarray:
        bits = np.zeros(length, dtype=np.uint8)
        for s, e in self.intervals:
            bits[s:e] = 1
        return bits


# ---------------------------------------------------------------------------
# Ingestion

def _fill_gaps(values: np.ndarray, missing: np.ndarray, period: float,
               max_fill_gap: float):
    """Forward-fill missing runs up to max_fill_gap seconds; longer runs
    become zeros flagged in the returned gap mask."""
    gap_mask = np.zeros(len(values), dtype=bool)
    if not missing.any():
        return values, None
    n = len(values)
    i = 0
    while i < n:
        if not missing[i]:
            i += 1
            continue
        j = i
        while j < n and missing[j]:
            j += 1
        run_s = (j - i) * period
        if i > 0 and run_s <= max_fill_gap:
            values[i:j] = values[i - 1]
        else:
            values[i:j] = 0.0
            gap_mask[i:j] = True
        i = j
    return values, gap_mask if gap_mask.any() else None


def load_series(path, period: float | None = None, *, time_column: int = 0,
                value_column: int = 1, delimiter: str = ",",
                max_fill_gap: float = MAX_FILL_GAP_S) -> TimeSeries:
    """Read a ``unix_timestamp,watts`` CSV (optional header) onto a uniform grid.

    Rows are sorted by timestamp and duplicates keep the last value.
    Negative watts clamp to 0; NaN watts count as missing. When ``period``
    is omitted it is inferred as the median timestamp difference.
    Timestamps snap to the nearest multiple of the period; grid slots with
    no data are forward-filled up to ``max_fill_gap`` seconds, and longer
    holes are zeroed and flagged unusable.
    """
    times, vals = [], []
    ncol = max(time_column, value_column) + 1
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(delimiter)
            if len(parts) < ncol:
                raise DataError(f"{path}: line {lineno}: expected at least "
                                f"{ncol} columns, got {len(parts)}")
            try:
                t = float(parts[time_column])
                v = float(parts[value_column])
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise DataError(f"{path}: line {lineno}: unparseable row {line!r}")
            times.append(t)
            vals.append(v)
    if not times:
        raise EmptyInputError(f"{path}: no data rows")

    order = np.argsort(np.asarray(times), kind="stable")
    t_arr = np.asarray(times, dtype=np.float64)[order]
    v_arr = np.asarray(vals, dtype=np.float64)[order]
    v_arr = np.where(np.isnan(v_arr), np.nan, np.maximum(v_arr, 0.0))

    if period is None:
        diffs = np.diff(t_arr)
        diffs = diffs[diffs > 0]
        if diffs.size == 0:
            raise DataError(f"{path}: cannot infer period from a single timestamp")
        period = float(np.median(diffs))

    slots = np.rint(t_arr / period).astype(np.int64)
    lo, hi = slots.min(), slots.max()
    n = int(hi - lo + 1)
    values = np.full(n, np.nan)
    values[slots - lo] = v_arr  # later rows overwrite: duplicates keep last
    missing = np.isnan(values)
    values = np.where(missing, 0.0, values)
    values, gap_mask = _fill_gaps(values, missing, period, max_fill_gap)
    return TimeSeries(float(lo * period), float(period), values, gap_mask)


# ---------------------------------------------------------------------------
# Resampling and alignment

def resample(series: TimeSeries, period: float,
             max_fill_gap: float = MAX_FILL_GAP_S) -> TimeSeries:
    """Re-grid a series to a new sampling period.

    Output sample j covers [j*period, (j+1)*period) and holds the mean of
    the valid source samples inside it. Empty slots are forward-filled up
    to ``max_fill_gap`` seconds and flagged unusable beyond that.
    """
    if period <= 0:
        raise DataError(f"target period must be positive, got {period}")
    if len(series) == 0 or len(series) * series.period < period:
        raise EmptyInputError("series shorter than one target period")
    if abs(series.period - period) < 1e-9:
        gm = None if series.gap_mask is None else series.gap_mask.copy()
        return TimeSeries(series.start_epoch, series.period,
                          series.values.copy(), gm)

    src_times = series.times()
    valid = np.ones(len(series), dtype=bool)
    if series.gap_mask is not None:
        valid &= ~series.gap_mask
    buckets = np.floor(src_times / period + 1e-9).astype(np.int64)
    lo, hi = buckets.min(), buckets.max()
    n = int(hi - lo + 1)
    sums = np.zeros(n)
    counts = np.zeros(n)
    np.add.at(sums, buckets[valid] - lo, series.values[valid])
    np.add.at(counts, buckets[valid] - lo, 1.0)
    missing = counts == 0
    values = np.where(missing, 0.0, sums / np.maximum(counts, 1.0))
    values, gap_mask = _fill_gaps(values, missing, period, max_fill_gap)
    return TimeSeries(float(lo * period), float(period), values, gap_mask)


def align(mains: TimeSeries, appliance: TimeSeries):
    """Trim two equal-period series to their overlapping time range."""
    if abs(mains.period - appliance.period) > 1e-9:
        raise DataError(f"periods differ: {mains.period} vs {appliance.period}")
    p = mains.period
    offset = (appliance.start_epoch - mains.start_epoch) / p
    if abs(offset - round(offset)) > 1e-6:
        raise DataError("series grids are not phase-aligned")
    t0 = max(mains.start_epoch, appliance.start_epoch)
    t1 = min(mains.end_epoch, appliance.end_epoch)
    if t1 - t0 < p - 1e-9:
        raise NoOverlapError("series share no common time range")
    n = int(round((t1 - t0) / p))
    i_m = int(round((t0 - mains.start_epoch) / p))
    i_a = int(round((t0 - appliance.start_epoch) / p))
    return mains.slice(i_m, i_m + n), appliance.slice(i_a, i_a + n)


# ---------------------------------------------------------------------------
# Activation masks and ON-intervals

def activation_mask(appliance: TimeSeries,
                    threshold: float = ON_THRESHOLD_W) -> ActivationMask:
    """Bit = 1 iff power strictly exceeds the threshold."""
    return ActivationMask(appliance.period,
                          (appliance.values > threshold).astype(np.uint8))


def _runs(bits: np.ndarray, value: int):
    """(start, end) half-open runs where bits == value."""
    n = len(bits)
    if n == 0:
        return []
    eq = bits == value
    edges = np.flatnonzero(np.diff(eq.astype(np.int8)))
    starts = np.concatenate(([0], edges + 1))
    ends = np.concatenate((edges + 1, [n]))
    return [(int(s), int(e)) for s, e in zip(starts, ends) if eq[s]]


def clean_mask(mask: ActivationMask, min_on: float = MIN_ON_S,
               max_gap: float = BRIDGE_GAP_S) -> ActivationMask:
    """Remove short ON runs, then bridge short interior OFF gaps.

    Both duration rules compare strictly: a run of d seconds is removed iff
    d < min_on; an OFF gap is bridged iff d < max_gap and it has ON samples
    on both sides. The two rules are applied once, in that order.
    """
    bits = mask.bits.copy()
    p = mask.period
    for s, e in _runs(bits, 1):
        if (e - s) * p < min_on:
            bits[s:e] = 0
    n = len(bits)
    for s, e in _runs(bits, 0):
        if s > 0 and e < n and (e - s) * p < max_gap:
            bits[s:e] = 1
    return ActivationMask(p, bits)


def extract_on_intervals(mask: ActivationMask) -> OnIntervalSet:
    """Maximal contiguous segments where the mask equals 1."""
    return OnIntervalSet(_runs(mask.bits, 1))
