"""Classification metrics, bootstrap intervals, ROC/AUC and study-level splits."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels
from .core import N_CLASSES, PhaseLabel

METRIC_NAMES = ("accuracy", "macro_precision", "macro_recall", "macro_f1")
LABEL_FIELDS = ("series_uid", "study_uid", "phase")


class LengthMismatch(ValueError):
    pass


class DegenerateClass(ValueError):
    pass


class TooFewStudies(ValueError):
    pass


class SchemaError(ValueError):
    """A CSV input does not follow its documented schema."""


def confusion(truth: Sequence, pred: Sequence) -> np.ndarray:
    """4x4 counts; rows are true classes, columns predicted classes."""
    t = np.asarray([int(x) for x in truth], dtype=np.int64)
    p = np.asarray([int(x) for x in pred], dtype=np.int64)
    if t.size == 0 or t.size != p.size:
        raise LengthMismatch(f"truth/pred lengths {t.size} and {p.size} must be equal and nonzero")
    if t.min() < 0 or p.min() < 0 or t.max() >= N_CLASSES or p.max() >= N_CLASSES:
        raise ValueError("labels must be phase ordinals 0..3")
    return np.bincount(t * N_CLASSES + p, minlength=N_CLASSES * N_CLASSES).reshape(N_CLASSES, N_CLASSES)


@dataclass(frozen=True)
class MacroMetrics:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    precision: tuple
    recall: tuple
    f1: tuple
    support: tuple


def _safe_div(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros(np.broadcast(num, den).shape), where=den > 0)


def _metric_table(cms: np.ndarray) -> dict:
    """Vectorized metrics over a (..., 4, 4) stack of confusion matrices."""
    cms = np.asarray(cms, dtype=np.float64)
    tp = np.diagonal(cms, axis1=-2, axis2=-1)
    pred_pos = cms.sum(axis=-2)
    true_pos = cms.sum(axis=-1)
    precision = _safe_div(tp, pred_pos)
    recall = _safe_div(tp, true_pos)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    total = cms.sum(axis=(-2, -1))
    return {
        "accuracy": _safe_div(tp.sum(axis=-1), total),
        "macro_precision": precision.mean(axis=-1),
        "macro_recall": recall.mean(axis=-1),
        "macro_f1": f1.mean(axis=-1),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "support": true_pos,
    }


def macro_metrics(cm) -> MacroMetrics:
    """Accuracy plus unweighted per-class means of precision, recall and F1.

    An empty denominator yields 0 for that class's precision or recall,
    and F1 is 0 when precision and recall are both 0.
    """
    cm = np.asarray(cm)
    if cm.shape != (N_CLASSES, N_CLASSES) or cm.sum() < 1:
        raise ValueError("need a nonempty 4x4 confusion matrix")
    t = _metric_table(cm)
    return MacroMetrics(
        accuracy=float(t["accuracy"]),
        macro_precision=float(t["macro_precision"]),
        macro_recall=float(t["macro_recall"]),
        macro_f1=float(t["macro_f1"]),
        precision=tuple(map(float, t["precision"])),
        recall=tuple(map(float, t["recall"])),
        f1=tuple(map(float, t["f1"])),
        support=tuple(int(x) for x in t["support"]),
    )


@dataclass(frozen=True)
class BootstrapCI:
    point: float
    lower: float
    upper: float
    resamples: int = 5000
    level: float = 0.95
    metric: str = "macro_f1"


# resamples drawn per RNG substream; the cap keeps index blocks small
_CHUNK = 500
_BLOCK_ELEMS = 2_000_000


def bootstrap_ci_arrays(truth, pred, metric: str = "macro_f1", resamples: int = 5000,
                        level: float = 0.95, seed: int = 0) -> BootstrapCI:
    """Percentile bootstrap interval of a metric, resampling items with replacement.

    Resample block ``b`` draws from ``default_rng([seed, b])``; block size
    depends only on the item count, so results depend only on the inputs
    and the seed.
    """
    if metric not in METRIC_NAMES:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRIC_NAMES}")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    if not 0 <= level < 1:
        raise ValueError("level must be in [0, 1)")
    cm = confusion(truth, pred)
    t = np.asarray([int(x) for x in truth], dtype=np.int64)
    codes = t * N_CLASSES + np.asarray([int(x) for x in pred], dtype=np.int64)
    n = codes.size
    block = max(1, min(_CHUNK, _BLOCK_ELEMS // n))
    values = np.empty(resamples)
    for b, start in enumerate(range(0, resamples, block)):
        m = min(block, resamples - start)
        idx = np.random.default_rng([seed, b]).integers(0, n, size=(m, n))
        counts = _kernels.bootstrap_counts(codes, idx, N_CLASSES * N_CLASSES)
        values[start:start + m] = _metric_table(counts.reshape(m, N_CLASSES, N_CLASSES))[metric]
    tail = (1 - level) / 2 * 100
    return BootstrapCI(
        point=float(_metric_table(cm)[metric]),
        lower=float(np.percentile(values, tail)),
        upper=float(np.percentile(values, 100 - tail)),
        resamples=resamples,
        level=level,
        metric=metric,
    )


def bootstrap_ci(items: Sequence, metric: str = "macro_f1", resamples: int = 5000,
                 level: float = 0.95, seed: int = 0) -> BootstrapCI:
    """Bootstrap interval over a sequence of (truth, pred) pairs."""
    if len(items) == 0:
        raise ValueError("no items to resample")
    truth, pred = zip(*items)
    return bootstrap_ci_arrays(truth, pred, metric, resamples, level, seed)


@dataclass(frozen=True)
class RocCurve:
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def roc_auc(truth: Sequence, scores, cls: PhaseLabel) -> RocCurve:
    """One-vs-rest ROC for ``cls``; AUC from the rank statistic, ties count half."""
    y = np.asarray([int(x) for x in truth]) == int(cls)
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 2:
        s = s[:, int(cls)]
    if s.shape != y.shape:
        raise LengthMismatch("one score row per label required")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClass(f"class {PhaseLabel(int(cls)).name} needs positives and negatives")

    order = np.argsort(s, kind="mergesort")
    s_sorted = s[order]
    starts = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    ends = np.r_[starts[1:], s_sorted.size]
    group_rank = (starts + ends + 1) / 2.0  # 1-based midranks
    ranks = np.empty(s.size)
    ranks[order] = np.repeat(group_rank, ends - starts)
    auc = (ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)

    # ROC points, thresholds descending: predict positive when score >= t
    pos_per_group = np.add.reduceat(y[order].astype(np.int64), starts)[::-1]
    size_per_group = (ends - starts)[::-1]
    tp = np.r_[0, np.cumsum(pos_per_group)]
    fp = np.r_[0, np.cumsum(size_per_group - pos_per_group)]
    thresholds = np.r_[np.inf, s_sorted[starts][::-1]]
    return RocCurve(float(auc), fp / n_neg, tp / n_pos, thresholds)


def study_split(items: Sequence, train_fraction: float = 0.7, seed: int = 0,
                key: Callable = lambda item: item.study_uid):
    """Partition items by study so no study lands on both sides.

    The number of training studies is round(fraction * n_studies), kept
    within [1, n_studies - 1].  Input order is preserved on each side.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    studies = sorted({str(key(it)) for it in items})
    if len(studies) < 2:
        raise TooFewStudies(f"need at least 2 studies to split, found {len(studies)}")
    n_train = round(Fraction(repr(float(train_fraction))) * len(studies))
    n_train = min(max(n_train, 1), len(studies) - 1)
    perm = np.random.default_rng(seed).permutation(len(studies))
    train_studies = {studies[i] for i in perm[:n_train]}
    train = [it for it in items if str(key(it)) in train_studies]
    test = [it for it in items if str(key(it)) not in train_studies]
    return train, test


# --------------------------------------------------------------------------
# label CSV
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelRow:
    series_uid: str
    study_uid: str
    phase: PhaseLabel


def read_labels(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in LABEL_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: header lacks column(s) {', '.join(missing)}")
        seen = set()
        for line_no, rec in enumerate(reader, start=2):
            uid = (rec["series_uid"] or "").strip()
            if not uid:
                raise SchemaError(f"{path}:{line_no}: empty series_uid")
            if uid in seen:
                raise SchemaError(f"{path}:{line_no}: duplicate series_uid {uid}")
            seen.add(uid)
            try:
                phase = PhaseLabel.from_slug(rec["phase"] or "")
            except ValueError as exc:
                raise SchemaError(f"{path}:{line_no}: {exc}") from None
            rows.append(LabelRow(uid, (rec["study_uid"] or "").strip(), phase))
    return rows


def write_labels(path, rows: Sequence[LabelRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_FIELDS)
        for r in rows:
            w.writerow([r.series_uid, r.study_uid, r.phase.slug])


# --------------------------------------------------------------------------
# evaluation report
# --------------------------------------------------------------------------


@dataclass
class LevelReport:
    """Metrics for one evaluation level (slices or scans)."""

    n_items: int
    confusion: list
    metrics: dict
    per_class: dict
    intervals: dict = field(default_factory=dict)
    auc: dict = field(default_factory=dict)


def level_report(truth, pred, scores=None, resamples: int = 5000, level: float = 0.95,
                 seed: int = 0) -> LevelReport:
    cm = confusion(truth, pred)
    mm = macro_metrics(cm)
    per_class = {
        lab.slug: {"precision": mm.precision[lab], "recall": mm.recall[lab], "f1": mm.f1[lab],
                   "support": mm.support[lab]}
        for lab in PhaseLabel
    }
    intervals = {}
    if resamples > 0:
        for name in METRIC_NAMES:
            ci = bootstrap_ci_arrays(truth, pred, name, resamples, level, seed)
            intervals[name] = {"lower": ci.lower, "upper": ci.upper, "resamples": resamples, "level": level}
    auc = {}
    if scores is not None:
        for lab in PhaseLabel:
            try:
                auc[lab.slug] = roc_auc(truth, scores, lab).auc
            except DegenerateClass:
                auc[lab.slug] = None
    return LevelReport(
        n_items=int(cm.sum()),
        confusion=cm.tolist(),
        metrics={name: getattr(mm, name) for name in METRIC_NAMES},
        per_class=per_class,
        intervals=intervals,
        auc=auc,
    )


@dataclass
class EvalReport:
    slice_level: Optional[LevelReport] = None
    scan_level: Optional[LevelReport] = None
    r_percent: Optional[float] = None
    seed: int = 0
    sweep: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {
            "schema": "phaserec-eval/1",
            "class_order": [lab.slug for lab in PhaseLabel],
            "seed": self.seed,
            "r_percent": self.r_percent,
            "slice_level": asdict(self.slice_level) if self.slice_level else None,
            "scan_level": asdict(self.scan_level) if self.scan_level else None,
            "r_sweep": [asdict(row) if hasattr(row, "__dataclass_fields__") else row for row in self.sweep],
        }
        return _clean_floats(out)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _clean_floats(obj):
    if isinstance(obj, dict):
        return {k: _clean_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean_floats(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
