"""Reference banks, training quadruples, and z-normalizers.

A quadruple pairs a mains query window with an appliance reference window
and center-point labels (instantaneous power in watts and ON/OFF state).
Quadruple sets are stored lazily as indices into the source series; the
reference choice per window is drawn once, seeded, and fixed thereafter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, EmptyInputError, InvalidShapeError, NoReferenceError
from .timeseries import ActivationMask, OnIntervalSet, TimeSeries

WINDOW_LEN = 599          # odd, so the center sample is well defined
EPS_STD = 1e-6


# ---------------------------------------------------------------------------
# z-normalization

@dataclass
class ZNormalizer:
    """Fitted (mean, std) pair; std is floored at EPS_STD."""

    mean: float
    std: float

    def transform(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def inverse(self, x):
        return np.asarray(x) * self.std + self.mean


def fit_znormalizer(values) -> ZNormalizer:
    """Fit mean and population standard deviation over a pooled value set."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise EmptyInputError("cannot fit a normalizer on empty data")
    mean = float(arr.mean())
    std = float(max(arr.std(), EPS_STD))
    return ZNormalizer(mean, std)


def znorm_apply(z: ZNormalizer, x, direction: str = "forward"):
    if direction == "forward":
        return z.transform(x)
    if direction == "inverse":
        return z.inverse(x)
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")


# ---------------------------------------------------------------------------
# Reference banks

@dataclass
class ReferenceBank:
    """Length-L appliance-power windows centered on ON-interval midpoints."""

    appliance: str
    windows: np.ndarray  # (n, L) watts

    def __len__(self):
        return len(self.windows)


def build_reference_bank(appliance: TimeSeries, intervals: OnIntervalSet,
                         window: int = WINDOW_LEN,
                         appliance_name: str = "") -> ReferenceBank:
    """Collect windows centered at interval midpoints that fit in the series.

    For each ON-interval [s, e): c = (s+e)//2 and t0 = c - window//2; the
    window is kept iff 0 <= t0 and t0 + window <= len(series). Intervals
    violating the bounds are silently skipped.
    """
    if window % 2 == 0:
        raise InvalidShapeError(f"window length must be odd, got {window}")
    n = len(appliance)
    rows = []
    for s, e in intervals:
        c = (s + e) // 2
        t0 = c - window // 2
        if 0 <= t0 and t0 + window <= n:
            rows.append(appliance.values[t0:t0 + window])
    windows = np.array(rows, dtype=np.float64) if rows else np.zeros((0, window))
    return ReferenceBank(appliance_name, windows)


# ---------------------------------------------------------------------------
# Quadruples

@dataclass
class TrainingQuadruple:
    query: np.ndarray      # mains watts, length L
    reference: np.ndarray  # appliance watts, length L
    power_label: float     # appliance watts at the window center
    on_label: int          # cleaned-mask bit at the window center


class QuadrupleSet:
    """Lazy view over all stride-1 windows of an aligned (mains, appliance) pair.

    Window t has query mains[t:t+L], a bank reference chosen at construction
    time, and labels at center index t + L//2. Windows overlapping flagged
    data gaps are excluded; on gap-free input the count is exactly N - L + 1.
    """

    def __init__(self, mains: TimeSeries, appliance: TimeSeries,
                 mask: ActivationMask, bank: ReferenceBank,
                 window: int = WINDOW_LEN, seed: int = 0):
        if window % 2 == 0:
            raise InvalidShapeError(f"window length must be odd, got {window}")
        n = len(mains)
        if len(appliance) != n or len(mask.bits) != n:
            raise DataError("mains, appliance, and mask lengths differ; align first")
        if abs(mains.period - appliance.period) > 1e-9:
            raise DataError("mains and appliance periods differ")
        if n < window:
            raise EmptyInputError(f"series length {n} shorter than window {window}")
        if len(bank) == 0:
            raise NoReferenceError(
                f"empty reference bank for appliance {bank.appliance!r}")

        self.mains = mains
        self.appliance = appliance
        self.mask = mask
        self.bank = bank
        self.window = window
        self.center_offset = window // 2
        self.seed = seed

        ts = np.arange(n - window + 1)
        bad = np.zeros(n, dtype=bool)
        for series in (mains, appliance):
            if series.gap_mask is not None:
                bad |= series.gap_mask
        if bad.any():
            # window t is usable iff [t, t+L) contains no flagged sample
            csum = np.concatenate(([0], np.cumsum(bad)))
            overlap = csum[window:] - csum[:-window]
            ts = ts[overlap == 0]
        self.ts = ts

        rng = np.random.default_rng(seed)
        self.ref_idx = rng.integers(0, len(bank), size=len(ts))

    def __len__(self):
        return len(self.ts)

    @property
    def power_labels(self) -> np.ndarray:
        return self.appliance.values[self.ts + self.center_offset]

    @property
    def on_labels(self) -> np.ndarray:
        return self.mask.bits[self.ts + self.center_offset].astype(np.float64)

    def queries(self, rows) -> np.ndarray:
        """Materialize query windows for positions ``rows`` (indices into ts)."""
        view = np.lib.stride_tricks.sliding_window_view(self.mains.values, self.window)
        return view[self.ts[rows]]

    def references(self, rows) -> np.ndarray:
        return self.bank.windows[self.ref_idx[rows]]

    def redraw_references(self, seed: int):
        """Optional per-epoch reference resampling (off by default upstream)."""
        rng = np.random.default_rng(seed)
        self.ref_idx = rng.integers(0, len(self.bank), size=len(self.ts))

    def materialize(self) -> list[TrainingQuadruple]:
        rows = np.arange(len(self.ts))
        queries = self.queries(rows)
        refs = self.references(rows)
        power = self.power_labels
        on = self.on_labels
        return [TrainingQuadruple(queries[i].copy(), refs[i].copy(),
                                  float(power[i]), int(on[i]))
                for i in range(len(rows))]


def generate_quadruple_set(mains, appliance, mask, bank, window: int = WINDOW_LEN,
                           seed: int = 0) -> QuadrupleSet:
    return QuadrupleSet(mains, appliance, mask, bank, window, seed)


def generate_quadruples(mains, appliance, mask, bank, window: int = WINDOW_LEN,
                        seed: int = 0) -> list[TrainingQuadruple]:
    """Materialized quadruple list (small inputs; training uses the lazy set)."""
    return generate_quadruple_set(mains, appliance, mask, bank, window, seed).materialize()


# ---------------------------------------------------------------------------
# On-disk dataset cache

MANIFEST_HEADER = "# refquery dataset manifest v1"


def write_dataset_manifest(path, entries, query_norm: ZNormalizer,
                           ref_norm: ZNormalizer, power_norm: ZNormalizer):
    """Write a plain-text cache of generated quadruples.

    Format: a header line; three ``normalizer <name> <mean> <std>`` lines;
    then per (building, appliance) a ``pair`` line followed by one ``quad``
    line per window: ``quad <t> <ref_idx> <power_label> <on_label>``.
    ``entries`` is an iterable of (building_id, appliance_name, QuadrupleSet).
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        for name, z in (("query", query_norm), ("reference", ref_norm),
                        ("power", power_norm)):
            fh.write(f"normalizer {name} {float(z.mean)!r} {float(z.std)!r}\n")
        for building, appliance, quad in entries:
            fh.write(f"pair {building} {appliance} window={quad.window} "
                     f"count={len(quad)} bank={len(quad.bank)} seed={quad.seed}\n")
            power = quad.power_labels
            on = quad.on_labels
            for i in range(len(quad)):
                fh.write(f"quad {quad.ts[i]} {quad.ref_idx[i]} "
                         f"{float(power[i])!r} {int(on[i])}\n")


def read_dataset_manifest(path):
    """Parse a dataset manifest back into normalizers and per-pair records.

    Returns (normalizers, pairs) where normalizers maps name -> ZNormalizer
    and pairs is a list of dicts with keys building, appliance, window,
    bank_size, seed, t, ref_idx, power_label, on_label arrays.
    """
    normalizers = {}
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != MANIFEST_HEADER:
            raise DataError(f"{path}: not a dataset manifest")
        for lineno, raw in enumerate(fh, start=2):
            parts = raw.split()
            if not parts:
                continue
            kind = parts[0]
            if kind == "normalizer":
                normalizers[parts[1]] = ZNormalizer(float(parts[2]), float(parts[3]))
            elif kind == "pair":
                meta = dict(kv.split("=") for kv in parts[3:])
                pairs.append({"building": parts[1], "appliance": parts[2],
                              "window": int(meta["window"]),
                              "bank_size": int(meta["bank"]),
                              "seed": int(meta["seed"]),
                              "t": [], "ref_idx": [], "power_label": [],
                              "on_label": []})
            elif kind == "quad":
                if not pairs:
                    raise DataError(f"{path}: line {lineno}: quad before pair")
                rec = pairs[-1]
                rec["t"].append(int(parts[1]))
                rec["ref_idx"].append(int(parts[2]))
                rec["power_label"].append(float(parts[3]))
                rec["on_label"].append(int(parts[4]))
            else:
                raise DataError(f"{path}: line {lineno}: unknown record {kind!r}")
    for rec in pairs:
        for key in ("t", "ref_idx", "power_label", "on_label"):
            rec[key] = np.asarray(rec[key])
    return normalizers, pairs
