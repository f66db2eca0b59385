"""Three-stage orchestration.

Stage I trains the shared encoder and head on fully labelled source
buildings with the summed MSE + BCE objective and early stopping on a
held-out building split. Stage II freezes the network and learns one
E-dimensional reference embedding per target appliance. Stage III slides
stride-1 windows over target mains and emits per-center state and watts.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import ndnet
from .errors import DataError, DivergenceError, EmptyInputError
from .metrics import ApplianceEval, EvalReport, evaluate_appliance
from .model import ModelBundle, NetConfig
from .ndnet import AdamState, ParamSet, Tape, Tensor, backward
from .timeseries import (
    BRIDGE_GAP_S,
    MIN_ON_S,
    ON_THRESHOLD_W,
    TimeSeries,
    activation_mask,
    align,
    clean_mask,
    extract_on_intervals,
)
from .windowing import (
    WINDOW_LEN,
    QuadrupleSet,
    ZNormalizer,
    build_reference_bank,
    fit_znormalizer,
    generate_quadruple_set,
)

log = logging.getLogger("refquery")


@dataclass
class TrainConfig:
    window: int = WINDOW_LEN
    channels: tuple = (32, 32, 64, 64, 128)
    embed_dim: int = 128
    hidden: int = 128
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-2
    batch_size: int = 1024
    patience: int = 5
    max_epochs_stage1: int = 100
    max_epochs_stage2: int = 200
    split_ratio: float = 0.8
    seed: int = 0
    train_stride: int = 1          # subsample stride over window starts (desk scale)
    val_stride: int = 1
    stage2_full_batch_limit: int = 16384
    project_embedding: bool = True
    resample_refs_each_epoch: bool = False
    on_threshold: float = ON_THRESHOLD_W
    min_on: float = MIN_ON_S
    bridge_gap: float = BRIDGE_GAP_S

    def net_config(self) -> NetConfig:
        return NetConfig(window=self.window, channels=tuple(self.channels),
                         embed_dim=self.embed_dim, hidden=self.hidden)


@dataclass
class BuildingData:
    building_id: str
    mains: TimeSeries
    appliances: dict[str, TimeSeries]

    def slice_time(self, t0: float, t1: float) -> "BuildingData":
        return BuildingData(self.building_id, self.mains.slice_time(t0, t1),
                            {k: v.slice_time(t0, t1)
                             for k, v in self.appliances.items()})


@dataclass
class PreparedPair:
    building_id: str
    appliance: str
    quad: QuadrupleSet


@dataclass
class SourceDataset:
    pairs: list[PreparedPair]
    query_norm: ZNormalizer
    ref_norm: ZNormalizer
    power_norm: ZNormalizer
    building_ids: list[str]


def _pair_seed(seed: int, building: str, appliance: str) -> int:
    return (seed * 1000003 + zlib.crc32(f"{building}/{appliance}".encode())) % 2**31


def prepare_source(buildings: list[BuildingData], cfg: TrainConfig) -> SourceDataset:
    """Masks, ON-intervals, reference banks, quadruple sets, and the three
    pooled normalizers for a set of source buildings."""
    pairs = []
    bank_values = []
    power_values = []
    mains_values = []
    for b in buildings:
        mains_values.append(b.mains.values)
        for name in sorted(b.appliances):
            mains, appl = align(b.mains, b.appliances[name])
            mask = clean_mask(activation_mask(appl, cfg.on_threshold),
                              cfg.min_on, cfg.bridge_gap)
            intervals = extract_on_intervals(mask)
            bank = build_reference_bank(appl, intervals, cfg.window, name)
            if len(bank) == 0:
                log.warning("building %s appliance %s: empty reference bank; "
                            "excluded from training", b.building_id, name)
                continue
            quad = generate_quadruple_set(
                mains, appl, mask, bank, cfg.window,
                seed=_pair_seed(cfg.seed, b.building_id, name))
            pairs.append(PreparedPair(b.building_id, name, quad))
            bank_values.append(bank.windows.reshape(-1))
            power_values.append(quad.power_labels)
    if not pairs:
        raise DataError("no (building, appliance) pair has a usable reference bank")
    query_norm = fit_znormalizer(np.concatenate(mains_values))
    ref_norm = fit_znormalizer(np.concatenate(bank_values))
    power_norm = fit_znormalizer(np.concatenate(power_values))
    return SourceDataset(pairs, query_norm, ref_norm, power_norm,
                         [b.building_id for b in buildings])


def split_buildings(building_ids, ratio: float = 0.8, seed: int = 0):
    """Disjoint, exhaustive (train, validation) split of building ids."""
    ids = sorted(building_ids)
    n = len(ids)
    if n < 2:
        raise DataError(f"need at least 2 buildings to split, got {n}")
    if not 0 < ratio < 1:
        raise DataError(f"split ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B17]))
    order = rng.permutation(n)
    n_train = min(max(int(np.floor(ratio * n)), 1), n - 1)
    train = [ids[i] for i in order[:n_train]]
    val = [ids[i] for i in order[n_train:]]
    return sorted(train), sorted(val)


# ---------------------------------------------------------------------------
# Stage I

@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_mse: float
    train_bce: float
    val_loss: float


@dataclass
class TrainResult:
    history: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    epochs_run: int = 0
    train_buildings: list[str] = field(default_factory=list)
    val_buildings: list[str] = field(default_factory=list)
    quadruple_counts: dict = field(default_factory=dict)


class _BatchIndex:
    """Flat (pair, window-row) index over a list of prepared pairs."""

    def __init__(self, pairs: list[PreparedPair], stride: int):
        self.pairs = pairs
        pair_idx, rows = [], []
        for i, p in enumerate(pairs):
            r = np.arange(0, len(p.quad), stride)
            pair_idx.append(np.full(len(r), i, dtype=np.int64))
            rows.append(r)
        self.pair_idx = np.concatenate(pair_idx) if pair_idx else np.zeros(0, np.int64)
        self.rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)

    def __len__(self):
        return len(self.rows)


def _batch_arrays(index: _BatchIndex, sel: np.ndarray, source: SourceDataset):
    """Materialize one batch: z-normed queries, unique z-normed references
    with gather indices, and z-normed labels. Rows are grouped by pair."""
    order = np.argsort(index.pair_idx[sel], kind="stable")
    sel = sel[order]
    pair_idx = index.pair_idx[sel]
    rows = index.rows[sel]

    queries = np.empty((len(sel), source.pairs[0].quad.window), dtype=np.float32)
    power = np.empty(len(sel), dtype=np.float32)
    on = np.empty(len(sel), dtype=np.float32)
    ref_keys = np.empty(len(sel), dtype=np.int64)
    pos = 0
    for i in np.unique(pair_idx):
        quad = source.pairs[i].quad
        mask = pair_idx == i
        r = rows[mask]
        k = len(r)
        queries[pos:pos + k] = source.query_norm.transform(quad.queries(r))
        power[pos:pos + k] = source.power_norm.transform(quad.power_labels[r])
        on[pos:pos + k] = quad.on_labels[r]
        ref_keys[pos:pos + k] = (np.int64(i) << 32) | quad.ref_idx[r]
        pos += k

    uniq, inverse = np.unique(ref_keys, return_inverse=True)
    refs = np.empty((len(uniq), source.pairs[0].quad.window), dtype=np.float32)
    for j, key in enumerate(uniq):
        quad = source.pairs[int(key >> 32)].quad
        refs[j] = source.ref_norm.transform(quad.bank.windows[int(key & 0xFFFFFFFF)])
    return queries, refs, inverse, power, on


def _forward_loss(bundle: ModelBundle, queries, refs, inverse, power, on):
    e_q = bundle.encoder.forward(Tensor(queries))
    e_r = ndnet.take_rows(bundle.encoder.forward(Tensor(refs)), inverse)
    state, y_z = bundle.head.forward(e_r, e_q)
    l_mse = ndnet.mse_loss(y_z, power)
    l_bce = ndnet.bce_loss(state, on)
    return ndnet.add(l_mse, l_bce), l_mse.item(), l_bce.item()


def _eval_loss(bundle: ModelBundle, index: _BatchIndex, source: SourceDataset,
               batch_size: int) -> float:
    total, count = 0.0, 0
    for lo in range(0, len(index), batch_size):
        sel = np.arange(lo, min(lo + batch_size, len(index)))
        arrays = _batch_arrays(index, sel, source)
        loss, _, _ = _forward_loss(bundle, *arrays)
        total += loss.item() * len(sel)
        count += len(sel)
    return total / count


def train_stage1(cfg: TrainConfig, source: SourceDataset):
    """Train the shared network on the source domain.

    Returns (bundle, TrainResult). The bundle carries the trained
    parameters from the best validation epoch, the fitted normalizers, and
    an empty embedding store.
    """
    train_ids, val_ids = split_buildings(source.building_ids,
                                         cfg.split_ratio, cfg.seed)
    train_pairs = [p for p in source.pairs if p.building_id in train_ids]
    val_pairs = [p for p in source.pairs if p.building_id in val_ids]
    if not train_pairs or not val_pairs:
        raise DataError("building split left train or validation empty")

    train_src = replace(source, pairs=train_pairs)
    val_src = replace(source, pairs=val_pairs)
    train_index = _BatchIndex(train_pairs, cfg.train_stride)
    val_index = _BatchIndex(val_pairs, cfg.val_stride)
    if len(train_index) == 0 or len(val_index) == 0:
        raise DataError("no training or validation quadruples after striding")

    bundle = ModelBundle.create(cfg.net_config(), source.query_norm,
                                source.ref_norm, source.power_norm,
                                seed=cfg.seed)
    params = bundle.params()
    adam = AdamState(params, lr=cfg.lr_stage1)

    result = TrainResult(train_buildings=train_ids, val_buildings=val_ids,
                         quadruple_counts={"train": len(train_index),
                                           "val": len(val_index)})
    best_val = np.inf
    best_snapshot = None
    since_improve = 0

    for epoch in range(cfg.max_epochs_stage1):
        if cfg.resample_refs_each_epoch and epoch > 0:
            for p in train_pairs:
                p.quad.redraw_references(_pair_seed(cfg.seed + epoch,
                                                    p.building_id, p.appliance))
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, epoch]))
        perm = rng.permutation(len(train_index))
        sum_loss = sum_mse = sum_bce = 0.0
        seen = 0
        for lo in range(0, len(perm), cfg.batch_size):
            sel = perm[lo:lo + cfg.batch_size]
            arrays = _batch_arrays(train_index, sel, train_src)
            params.zero_grads()
            with Tape() as tape:
                loss, mse_v, bce_v = _forward_loss(bundle, *arrays)
            loss_v = loss.item()
            if not np.isfinite(loss_v):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}",
                    diagnostics={"epoch": epoch, "batch_start": int(lo),
                                 "mse": mse_v, "bce": bce_v})
            backward(tape, loss)
            adam.step(params)
            sum_loss += loss_v * len(sel)
            sum_mse += mse_v * len(sel)
            sum_bce += bce_v * len(sel)
            seen += len(sel)

        val_loss = _eval_loss(bundle, val_index, val_src, cfg.batch_size)
        if not np.isfinite(val_loss):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}",
                                  diagnostics={"epoch": epoch})
        stats = EpochStats(epoch, sum_loss / seen, sum_mse / seen,
                           sum_bce / seen, val_loss)
        result.history.append(stats)
        result.epochs_run = epoch + 1
        log.info("epoch %d: train %.5f (mse %.5f bce %.5f) val %.5f",
                 epoch, stats.train_loss, stats.train_mse, stats.train_bce,
                 val_loss)

        if val_loss < best_val:
            best_val = val_loss
            best_snapshot = params.snapshot()
            result.best_epoch = epoch
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= cfg.patience:
                break

    params.restore(best_snapshot)
    return bundle, result


# ---------------------------------------------------------------------------
# Stage II

class AdaptationSet:
    """Labelled target windows for one appliance: queries plus center labels.

    No reference windows are involved; the learned embedding replaces them.
    """

    def __init__(self, mains: TimeSeries, appliance: TimeSeries, mask,
                 window: int = WINDOW_LEN):
        n = len(mains)
        if len(appliance) != n:
            raise DataError("mains and appliance lengths differ; align first")
        if n < window:
            raise EmptyInputError(f"need at least {window} samples, got {n}")
        self.mains = mains
        self.appliance = appliance
        self.mask = mask
        self.window = window
        self.center_offset = window // 2
        ts = np.arange(n - window + 1)
        bad = np.zeros(n, dtype=bool)
        for series in (mains, appliance):
            if series.gap_mask is not None:
                bad |= series.gap_mask
        if bad.any():
            csum = np.concatenate(([0], np.cumsum(bad)))
            ts = ts[(csum[window:] - csum[:-window]) == 0]
        if len(ts) == 0:
            raise EmptyInputError("no usable windows in the adaptation range")
        self.ts = ts

    def __len__(self):
        return len(self.ts)

    @property
    def power_labels(self):
        return self.appliance.values[self.ts + self.center_offset]

    @property
    def on_labels(self):
        return self.mask.bits[self.ts + self.center_offset].astype(np.float64)

    def queries(self, rows):
        view = np.lib.stride_tricks.sliding_window_view(self.mains.values,
                                                        self.window)
        return view[self.ts[rows]]


def prepare_adaptation(building: BuildingData, appliance_name: str,
                       cfg: TrainConfig) -> AdaptationSet:
    if appliance_name not in building.appliances:
        raise DataError(f"building {building.building_id!r} has no appliance "
                        f"{appliance_name!r}")
    mains, appl = align(building.mains, building.appliances[appliance_name])
    mask = clean_mask(activation_mask(appl, cfg.on_threshold),
                      cfg.min_on, cfg.bridge_gap)
    return AdaptationSet(mains, appl, mask, cfg.window)


def _encode_windows(bundle: ModelBundle, windows_fn, n, window,
                    batch_size) -> np.ndarray:
    """Run the frozen encoder over z-normed query windows, batched, no tape."""
    out = np.empty((n, bundle.config.embed_dim), dtype=np.float32)
    for lo in range(0, n, batch_size):
        rows = np.arange(lo, min(lo + batch_size, n))
        q = bundle.query_norm.transform(windows_fn(rows)).astype(np.float32)
        out[rows] = bundle.encoder.forward(Tensor(q)).data
    return out


def init_embedding(embed_dim: int, seed) -> np.ndarray:
    """Random point on the unit sphere."""
    rng = np.random.default_rng(seed)
    v = rng.normal(size=embed_dim)
    return (v / np.linalg.norm(v)).astype(np.float32)


@dataclass
class Stage2Result:
    appliance: str
    embedding: np.ndarray
    trainable_values: int
    epochs_run: int
    best_epoch: int
    history: list[float]
    checksum_before: str
    checksum_after: str


def adapt_stage2(bundle: ModelBundle, adapt: AdaptationSet, cfg: TrainConfig,
                 appliance_name: str, init_seed=None) -> Stage2Result:
    """Learn one appliance embedding against a frozen network.

    Only the E embedding values are optimized (Adam, the stage-2 learning
    rate, early stopping on training loss). The embedding that achieved the
    best loss is stored in the bundle under ``appliance_name``.
    """
    if len(adapt) == 0:
        raise EmptyInputError("adaptation set is empty")
    bundle.set_trainable(False)
    checksum_before = bundle.checksum()

    e_q_all = _encode_windows(bundle, adapt.queries, len(adapt), adapt.window,
                              cfg.batch_size)
    power = bundle.power_norm.transform(adapt.power_labels).astype(np.float32)
    on = adapt.on_labels.astype(np.float32)

    if init_seed is None:
        init_seed = np.random.SeedSequence(
            [cfg.seed, 2, zlib.crc32(appliance_name.encode())])
    emb = Tensor(init_embedding(cfg.embed_dim, init_seed), requires_grad=True)
    ps = ParamSet()
    ps.add("embedding", emb)
    adam = AdamState(ps, lr=cfg.lr_stage2)

    n = len(adapt)
    full_batch = n <= cfg.stage2_full_batch_limit
    best_loss = np.inf
    best = emb.data.copy()
    best_epoch = -1
    since_improve = 0
    history = []
    epochs_run = 0

    for epoch in range(cfg.max_epochs_stage2):
        if full_batch:
            batches = [np.arange(n)]
        else:
            rng = np.random.default_rng(np.random.SeedSequence(
                [cfg.seed, 3, epoch, zlib.crc32(appliance_name.encode())]))
            perm = rng.permutation(n)
            batches = [perm[lo:lo + cfg.batch_size]
                       for lo in range(0, n, cfg.batch_size)]
        sum_loss = 0.0
        for rows in batches:
            ps.zero_grads()
            with Tape() as tape:
                state, y_z = bundle.head.forward(emb, Tensor(e_q_all[rows]))
                loss = ndnet.add(ndnet.mse_loss(y_z, power[rows]),
                                 ndnet.bce_loss(state, on[rows]))
            loss_v = loss.item()
            if not np.isfinite(loss_v):
                raise DivergenceError(
                    f"non-finite adaptation loss for {appliance_name!r}",
                    diagnostics={"epoch": epoch})
            backward(tape, loss)
            adam.step(ps)
            if cfg.project_embedding:
                norm = float(np.linalg.norm(emb.data))
                if norm > ndnet.EPS_NORM:
                    emb.data /= norm
            sum_loss += loss_v * len(rows)
        epoch_loss = sum_loss / n
        history.append(epoch_loss)
        epochs_run = epoch + 1
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best = emb.data.copy()
            best_epoch = epoch
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= cfg.patience:
                break

    checksum_after = bundle.checksum()
    if checksum_after != checksum_before:
        raise RuntimeError("frozen parameters changed during adaptation")
    bundle.add_embedding(appliance_name, best)
    return Stage2Result(appliance_name, best, int(emb.size), epochs_run,
                        best_epoch, history, checksum_before, checksum_after)


# ---------------------------------------------------------------------------
# Stage III

@dataclass
class PredictionSeries:
    """Per-center-sample predictions over a mains series."""

    center_times: np.ndarray
    state_prob: np.ndarray
    watts: np.ndarray
    period: float

    def __len__(self):
        return len(self.watts)


def infer_stage3(bundle: ModelBundle, embedding, mains: TimeSeries,
                 batch_size: int = 512, stride: int = 1) -> PredictionSeries:
    """Disaggregate one appliance from mains with a fixed embedding.

    ``embedding`` is an (E,) vector or the name of a stored one. Windows
    slide at the given stride (default 1); each yields the state
    probability and non-negative watts at its center sample.
    """
    if isinstance(embedding, str):
        embedding = bundle.get_embedding(embedding)
    embedding = np.asarray(embedding, dtype=np.float32)
    n = len(mains)
    window = bundle.config.window
    if n < window:
        raise EmptyInputError(f"mains has {n} samples; need at least {window}")
    ts = np.arange(0, n - window + 1, stride)
    view = np.lib.stride_tricks.sliding_window_view(mains.values, window)

    state = np.empty(len(ts), dtype=np.float32)
    y_z = np.empty(len(ts), dtype=np.float32)
    emb_t = Tensor(embedding)
    for lo in range(0, len(ts), batch_size):
        rows = np.arange(lo, min(lo + batch_size, len(ts)))
        q = bundle.query_norm.transform(view[ts[rows]]).astype(np.float32)
        e_q = bundle.encoder.forward(Tensor(q))
        s, yz = bundle.head.forward(emb_t, e_q)
        state[rows] = s.data
        y_z[rows] = yz.data

    # anchored inverse: sigma * (y_z - b_off) equals the inverse z-transform
    # but makes a fully-OFF prediction exactly 0 W
    sigma = np.float32(bundle.power_norm.std)
    watts = np.maximum(sigma * (y_z - np.float32(bundle.head.b_off)), 0.0)
    p = window // 2
    center_times = mains.start_epoch + (ts + p) * mains.period
    return PredictionSeries(center_times, state, watts, mains.period * stride)


# ---------------------------------------------------------------------------
# Evaluation and the sensitivity grid

def evaluate_home(bundle: ModelBundle, home: BuildingData, appliances,
                  cfg: TrainConfig, batch_size: int = 512) -> EvalReport:
    """Stage III over a labelled home, scored against the ground truth."""
    entries = []
    for name in appliances:
        mains, appl = align(home.mains, home.appliances[name])
        pred = infer_stage3(bundle, name, mains, batch_size=batch_size)
        p = bundle.config.window // 2
        centers = np.arange(len(pred)) + p
        truth_watts = appl.values[centers]
        mask = clean_mask(activation_mask(appl, cfg.on_threshold),
                          cfg.min_on, cfg.bridge_gap)
        truth_states = mask.bits[centers]
        entries.append(evaluate_appliance(name, truth_watts, truth_states,
                                          pred.watts, pred.state_prob))
    return EvalReport(entries)


@dataclass
class SensitivityProtocol:
    """Everything one sweep configuration needs: sources for Stage I, a
    target home with an adaptation range and a held-out evaluation range."""

    source: list[BuildingData]
    target: BuildingData
    appliances: list[str]
    adapt_span: tuple[float, float]   # epoch seconds [t0, t1)
    eval_span: tuple[float, float]
    base_config: TrainConfig


@dataclass
class SweepRow:
    rank: int
    embed_dim: int
    hidden: int
    per_appliance_mae: dict[str, float]
    avg_mae: float


def run_sensitivity(grid, protocol: SensitivityProtocol, seed: int = 0) -> list[SweepRow]:
    """One full train + adapt + evaluate run per (E, H); ranked by avg MAE."""
    grid = sorted(set((int(e), int(h)) for e, h in grid))
    if not grid:
        raise DataError("sensitivity grid is empty")
    rows = []
    for e, h in grid:
        cfg = replace(protocol.base_config, embed_dim=e, hidden=h, seed=seed)
        source = prepare_source(protocol.source, cfg)
        bundle, _ = train_stage1(cfg, source)
        adapt_home = protocol.target.slice_time(*protocol.adapt_span)
        for name in protocol.appliances:
            adapt = prepare_adaptation(adapt_home, name, cfg)
            adapt_stage2(bundle, adapt, cfg, name)
        eval_home = protocol.target.slice_time(*protocol.eval_span)
        report = evaluate_home(bundle, eval_home, protocol.appliances, cfg)
        per = {entry.name: entry.mae for entry in report.entries}
        rows.append(SweepRow(0, e, h, per, report.avg_mae))
        log.info("sweep (E=%d, H=%d): avg MAE %.2f W", e, h, report.avg_mae)
    rows.sort(key=lambda r: r.avg_mae)
    for i, row in enumerate(rows):
        row.rank = i + 1
    return rows


def render_sweep_table(rows: list[SweepRow]) -> str:
    appliances = list(rows[0].per_appliance_mae) if rows else []
    header = ["Rank", "E", "H"] + appliances + ["Avg MAE"]
    table = [header]
    for r in rows:
        table.append([str(r.rank), str(r.embed_dim), str(r.hidden)]
                     + [f"{r.per_appliance_mae[a]:.2f}" for a in appliances]
                     + [f"{r.avg_mae:.2f}"])
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(row, widths))
             for row in table]
    return "\n".join(lines)
