"""
Thresholding, confusion counts, the five segmentation metrics and their
aggregation over test images, runs and folds.
"""
import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, InvalidInputError

log = logging.getLogger(__name__)

METRIC_NAMES = ("sp", "se", "acc", "auc", "gmean")
TABLE_HEADERS = {"sp": "Sp", "se": "Se", "acc": "Acc", "auc": "AUC", "gmean": "G-mean"}


class UndefinedMetricWarning(UserWarning):
    pass


class AggregationMode(str, Enum):
    RUNS = "runs"
    FOLDS = "folds"


def binarize(prob_map, threshold=0.5):
    """Vessel where the probability is strictly greater than ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")
    return np.asarray(prob_map) > threshold


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def confusion(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise InvalidInputError(f"prediction {pred.shape} and truth {truth.shape} differ")
    p, t = pred.astype(bool), truth.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, p.size - tp - fp - fn, fp, fn)


def roc_curve(scores, truth):
    """Exact ROC over every distinct score, as integer ``(fp, tp)`` count arrays.

    Both arrays start at 0 (threshold above the maximum) and end at the class totals.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel().astype(bool)
    if scores.shape != truth.shape:
        raise InvalidInputError("scores and truth differ in size")
    order = np.argsort(-scores, kind="mergesort")
    s, t = scores[order], truth[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s)), s.size - 1] if s.size else np.array([], dtype=int)
    tps = np.cumsum(t, dtype=np.int64)[last_of_run]
    fps = np.cumsum(~t, dtype=np.int64)[last_of_run]
    return np.r_[0, fps], np.r_[0, tps]


def roc_auc(scores, truth):
    """Trapezoidal area under the exact ROC; NaN when a class is absent."""
    fps, tps = roc_curve(scores, truth)
    pos, neg = int(tps[-1]), int(fps[-1])
    if pos == 0 or neg == 0:
        return math.nan
    # twice the trapezoid area in integer units keeps the sum exact
    doubled = int(np.sum(np.diff(fps) * (tps[1:] + tps[:-1])))
    return doubled / (2 * pos * neg)


def gmean(se, sp):
    return math.sqrt(se * sp)


def _ratio(num, den):
    return num / den if den else math.nan


@dataclass
class ImageMetrics:
    identifier: str
    sp: float
    se: float
    acc: float
    auc: float
    gmean: float
    counts: ConfusionCounts = field(default_factory=ConfusionCounts)

    def values(self):
        return {k: getattr(self, k) for k in METRIC_NAMES}


def metrics(counts, prob_map, truth, identifier=""):
    """Sp, Se, Acc, AUC and G-mean for one image.

    Undefined rates (no vessel or no background pixels) become NaN and raise
    an :class:`UndefinedMetricWarning`; aggregation skips them.
    """
    se = _ratio(counts.tp, counts.tp + counts.fn)
    sp = _ratio(counts.tn, counts.tn + counts.fp)
    acc = _ratio(counts.tp + counts.tn, counts.total)
    auc = roc_auc(prob_map, truth)
    if math.isnan(se) or math.isnan(sp):
        warnings.warn(f"{identifier or 'image'}: one class is absent, some metrics undefined",
                      UndefinedMetricWarning, stacklevel=2)
    g = math.nan if math.isnan(se) or math.isnan(sp) else gmean(se, sp)
    return ImageMetrics(identifier, sp, se, acc, auc, g, counts)


def evaluate_map(prob_map, truth, threshold=0.5, identifier=""):
    return metrics(confusion(binarize(prob_map, threshold), truth), prob_map, truth, identifier)


@dataclass
class MetricsReport:
    """Mean and standard error of each metric over ``n`` units (images, runs or folds)."""

    sp: float
    se: float
    acc: float
    auc: float
    gmean: float
    stderr: dict = field(default_factory=dict)
    n: int = 1
    mode: str = "images"
    per_image: list = field(default_factory=list)
    label: str = ""

    def values(self):
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_dict(self):
        d = asdict(self)
        d["per_image"] = [
            {"identifier": m.identifier, **m.values(), **asdict(m.counts)} for m in self.per_image
        ]
        return d


def _nanmean(values):
    vals = [v for v in values if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else math.nan


def summarize_run(image_metrics, label=""):
    """Average per-image metrics over one run's test images.

    Se/Sp/Acc/AUC are image means; G-mean is recomputed from the run's mean
    Se and Sp so that ``gmean**2 == se * sp`` holds per run.
    """
    if not image_metrics:
        raise InvalidInputError("no image metrics to summarise")
    means = {k: _nanmean([getattr(m, k) for m in image_metrics]) for k in ("sp", "se", "acc", "auc")}
    g = math.nan if math.isnan(means["se"]) or math.isnan(means["sp"]) else gmean(means["se"], means["sp"])
    return MetricsReport(**means, gmean=g, n=len(image_metrics), mode="images",
                         per_image=list(image_metrics), label=label)


def aggregate(reports, mode=AggregationMode.RUNS, label=""):
    """Mean and standard error (sample std / sqrt(n)) across runs or folds."""
    mode = AggregationMode(mode)
    if not reports:
        raise InvalidInputError("cannot aggregate an empty list of reports")
    means, errs = {}, {}
    for k in METRIC_NAMES:
        vals = np.array([getattr(r, k) for r in reports], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            means[k], errs[k] = math.nan, math.nan
            continue
        means[k] = float(vals.mean())
        errs[k] = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    per_image = [m for r in reports for m in r.per_image]
    return MetricsReport(**means, stderr=errs, n=len(reports), mode=mode.value, per_image=per_image, label=label)


# -- report files ------------------------------------------------------------


def write_per_image_csv(path, rows):
    """``rows`` are ``(run_label, ImageMetrics)`` pairs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "image", *[TABLE_HEADERS[k] for k in METRIC_NAMES], "tp", "tn", "fp", "fn"])
        for run, m in rows:
            c = m.counts
            writer.writerow([run, m.identifier, *[_fmt(v) for v in m.values().values()], c.tp, c.tn, c.fp, c.fn])
    return path


def _fmt(v, digits=4):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.{digits}f}"


def table_rows(reports, stderr_scale=None):
    """Rows ``[Method, Sp, Se, Acc, AUC, G-mean]``; a stderr row follows each
    report aggregated over more than one run or fold."""
    rows = []
    for r in reports:
        rows.append([r.label, *[_fmt(getattr(r, k)) for k in METRIC_NAMES]])
        if r.n > 1 and r.mode != "images" and r.stderr:
            if stderr_scale:
                label = f"stderr x 1e-{stderr_scale}"
                vals = [_fmt(r.stderr[k] * 10**stderr_scale, 1) for k in METRIC_NAMES]
            else:
                label, vals = "stderr", [_fmt(r.stderr[k]) for k in METRIC_NAMES]
            rows.append([label, *vals])
    return rows


def write_table_csv(path, reports, stderr_scale=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Method", *[TABLE_HEADERS[k] for k in METRIC_NAMES]])
        writer.writerows(table_rows(reports, stderr_scale))
    return path


def format_table(reports):
    header = ["Method", *[TABLE_HEADERS[k] for k in METRIC_NAMES]]
    rows = [header, *table_rows(reports)]
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(header))]
    return "\n".join("  ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows)


def _clean(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    return obj


def write_jsonl(path, records):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(_clean(rec)) + "\n")
    return path
