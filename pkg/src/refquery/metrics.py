"""Evaluation metrics: MAE in watts and event F1 from state probabilities."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatchError, InvalidShapeError

STATE_THRESHOLD = 0.5


def mae(truth, pred) -> float:
    """Mean absolute difference in watts."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise InvalidShapeError(f"mae shapes differ: {truth.shape} vs {pred.shape}")
    if truth.size == 0:
        raise EmptyBatchError("mae over an empty sequence")
    return float(np.abs(truth - pred).mean())


def f1(truth_states, probs, threshold: float = STATE_THRESHOLD):
    """Event F1 = 2TP / (2TP + FP + FN) with prediction = (prob >= threshold).

    Returns (f1, tp, fp, fn); a zero denominator yields F1 = 0.
    """
    truth = np.asarray(truth_states).astype(bool)
    probs = np.asarray(probs, dtype=np.float64)
    if truth.shape != probs.shape:
        raise InvalidShapeError(f"f1 shapes differ: {truth.shape} vs {probs.shape}")
    if truth.size == 0:
        raise EmptyBatchError("f1 over an empty sequence")
    pred = probs >= threshold
    tp = int(np.count_nonzero(truth & pred))
    fp = int(np.count_nonzero(~truth & pred))
    fn = int(np.count_nonzero(truth & ~pred))
    denom = 2 * tp + fp + fn
    score = 2 * tp / denom if denom > 0 else 0.0
    return score, tp, fp, fn


@dataclass
class ApplianceEval:
    name: str
    mae: float
    f1: float
    tp: int
    fp: int
    fn: int
    off_mean_watts: float | None = None  # mean prediction where truth is OFF


def evaluate_appliance(name, truth_watts, truth_states, pred_watts,
                       pred_probs, threshold: float = STATE_THRESHOLD) -> ApplianceEval:
    err = mae(truth_watts, pred_watts)
    score, tp, fp, fn = f1(truth_states, pred_probs, threshold)
    truth_states = np.asarray(truth_states).astype(bool)
    off = ~truth_states
    off_mean = float(np.asarray(pred_watts)[off].mean()) if off.any() else None
    return ApplianceEval(name, err, score, tp, fp, fn, off_mean)


@dataclass
class EvalReport:
    entries: list[ApplianceEval] = field(default_factory=list)

    @property
    def avg_mae(self) -> float:
        return float(np.mean([e.mae for e in self.entries]))

    @property
    def avg_f1(self) -> float:
        return float(np.mean([e.f1 for e in self.entries]))

    def to_dict(self) -> dict:
        return {
            "appliances": [
                {"name": e.name, "mae": e.mae, "f1": e.f1, "tp": e.tp,
                 "fp": e.fp, "fn": e.fn, "off_mean_watts": e.off_mean_watts}
                for e in self.entries
            ],
            "avg_mae": self.avg_mae,
            "avg_f1": self.avg_f1,
        }

    def to_text(self) -> str:
        """Aligned table: appliances as columns, MAE and F1 rows."""
        names = [e.name for e in self.entries]
        width = max([len(n) for n in names + ["Metric"]] + [8])
        cols = [n.rjust(width) for n in names] + ["Ave".rjust(width)]
        lines = ["Metric".ljust(8) + " " + " ".join(cols)]
        maes = [f"{e.mae:.2f}".rjust(width) for e in self.entries]
        maes.append(f"{self.avg_mae:.2f}".rjust(width))
        lines.append("MAE (W)".ljust(8) + " " + " ".join(maes))
        f1s = [f"{e.f1:.3f}".rjust(width) for e in self.entries]
        f1s.append(f"{self.avg_f1:.3f}".rjust(width))
        lines.append("F1".ljust(8) + " " + " ".join(f1s))
        return "\n".join(lines)
