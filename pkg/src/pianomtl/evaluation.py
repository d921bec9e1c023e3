"""Framewise precision/recall/F1, coefficient of determination and report rows."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

DASH = "-"
F1_TASKS = ("on", "int", "off")
R2_TASKS = ("vel", "sus")


class DegenerateTarget(ValueError):
    pass


@dataclass(frozen=True)
class FramewiseCounts:
    tp: int
    fp: int
    fn: int

    def __add__(self, other):
        return FramewiseCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def binarize(probabilities, threshold=0.5):
    return (np.asarray(probabilities) > threshold).astype(np.uint8)


def framewise_counts(pred, target):
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    tp = int(np.count_nonzero(pred & target))
    return FramewiseCounts(tp, int(np.count_nonzero(pred)) - tp, int(np.count_nonzero(target)) - tp)


def prf_from_counts(counts):
    """Precision, recall, F1 from globally summed counts; empty denominators give 0."""
    tp, fp, fn = counts.tp, counts.fp, counts.fn
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def framewise_prf(pred, target):
    return prf_from_counts(framewise_counts(pred, target))


def r_squared(pred, target):
    y = np.asarray(target, dtype=np.float64).ravel()
    y_hat = np.asarray(pred, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"prediction {y_hat.shape} and target {y.shape} differ")
    if y.size < 2:
        raise ValueError("R^2 needs at least two values")
    total = np.sum((y - y.mean()) ** 2)
    if total == 0:
        raise DegenerateTarget("target has zero variance")
    return float(1.0 - np.sum((y - y_hat) ** 2) / total)


@dataclass
class EvalReport:
    """One result row.  ``None`` metrics are rendered as ``-``."""

    on: float | None = None
    int: float | None = None
    off: float | None = None
    vel: float | None = None
    sus: float | None = None
    architecture: str = ""
    stitch_mode: str = ""
    alpha_init: str = ""
    weights: dict = field(default_factory=dict)
    lr: float | None = None
    unstable: bool = False

    def to_json(self):
        return json.dumps({"event": "report", **asdict(self)}, sort_keys=True)

    @classmethod
    def from_json(cls, line):
        d = json.loads(line) if isinstance(line, str) else dict(line)
        d.pop("event", None)
        return cls(**d)

    @classmethod
    def unstable_row(cls, **meta):
        return cls(unstable=True, **meta)

    def metric(self, task):
        return None if self.unstable else getattr(self, task)


def predict_frames(model, dataset, batch_size=256):
    """Evaluation-mode predictions for every frame of ``dataset``, concatenated."""
    outs = {t: [] for t in ("on", "int", "off", "vel", "sus")}
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        x, _ = dataset.batch(idx)
        pred = model(x, training=False).numpy()
        for t in outs:
            outs[t].append(pred[t])
    return {t: np.concatenate(v).reshape(len(dataset), -1) for t, v in outs.items()}


def score(pred, target, threshold=0.5, weights=None):
    """Metrics of prediction arrays against target arrays (dicts keyed by task)."""
    row = {}
    for t in F1_TASKS:
        row[t] = framewise_prf(binarize(pred[t], threshold), target[t])[2]
    for t in R2_TASKS:
        if weights is not None and weights[t] == 0:
            row[t] = None
            continue
        try:
            row[t] = r_squared(pred[t], np.asarray(target[t]).reshape(pred[t].shape))
        except DegenerateTarget:
            row[t] = None
    return row


def evaluate(model, dataset, threshold=0.5, weights=None, lr=None):
    pred = predict_frames(model, dataset)
    target = dataset.all_targets()
    row = score(pred, target, threshold, weights)
    spec = model.spec
    cross = spec.architecture == "cross_stitch"
    return EvalReport(
        **row, architecture=spec.architecture,
        stitch_mode=spec.stitch_mode if cross else "",
        alpha_init=spec.alpha_init if cross else "",
        weights=dict(weights.__dict__) if weights is not None else {}, lr=lr)


def _fmt(value):
    return DASH if value is None or (isinstance(value, float) and math.isnan(value)) else f"{value:.4f}"


def _fmt_weight(value):
    return DASH if value is None else f"{value:g}"


def render_table(rows):
    """Plain-text table: setting columns, then On/Int/Off F1 and Vel/Sus R^2, then mean/std."""
    cross = any(r.architecture == "cross_stitch" for r in rows)
    if cross:
        setting = ["Type", "Init"]
        labels = [[("Det" if r.stitch_mode == "detached" else "Full"),
                   ("Bal" if r.alpha_init == "balanced" else "Imb")] for r in rows]
    else:
        setting = ["l_vel", "l_sus"]
        labels = [[_fmt_weight(r.weights.get("vel")), _fmt_weight(r.weights.get("sus"))] for r in rows]
    metrics = ["On F1", "Int F1", "Off F1", "Vel R2", "Sus R2"]
    tasks = F1_TASKS + R2_TASKS
    body = [[str(i + 1)] + lab + [_fmt(r.metric(t)) for t in tasks] for i, (r, lab) in enumerate(zip(rows, labels))]
    means, stds = ["", "", "mean"], ["", "", "std"]
    for t in tasks:
        values = [r.metric(t) for r in rows if r.metric(t) is not None]
        means.append(_fmt(float(np.mean(values))) if values else DASH)
        stds.append(_fmt(float(np.std(values))) if values else DASH)
    header = [""] + setting + metrics
    table = [header] + body + [means, stds]
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = []
    for i, row in enumerate(table):
        if i == 1 or i == len(body) + 1:
            lines.append("-+-".join("-" * w for w in widths))
        lines.append(" | ".join(cell.rjust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines)
