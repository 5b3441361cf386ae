"""Scan-level phase prediction: sample R% of slices, classify, majority-vote.

Sampling uses SplitMix64 (Steele, Lea & Flood 2014) driving a partial
Fisher-Yates shuffle, with rejection sampling for unbiased bounded draws.
The generator is fully specified by its 64-bit state, so index sets are
reproducible on any platform.  Each scan's sample is derived from the
global seed and the scan's SeriesInstanceUID, which makes per-scan
results independent of scan order.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from . import _kernels
from .core import N_CLASSES, CtScan, PhaseLabel
from .evaluate import SchemaError, confusion, macro_metrics
from .model import LinearModelParams, predict_batch
from .preprocess import DEFAULT_FEATURES, DEFAULT_WINDOW, FeatureConfig, WindowSpec, volume_features

DEFAULT_R_GRID = (1, 5, 10, 15, 20, 30, 40, 50, 60, 70, 80, 90, 100)
PREDICTION_FIELDS = (
    "series_uid", "study_uid", "predicted_phase",
    "votes_nc", "votes_art", "votes_ven", "votes_other", "k_sampled", "seed",
)


@dataclass(frozen=True)
class SamplerConfig:
    r_percent: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.r_percent <= 100:
            raise ValueError(f"r_percent must be in (0, 100], got {self.r_percent}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


def sample_size(n_slices: int, r_percent: float) -> int:
    """max(1, ceil(n * R / 100)), computed on the decimal value of R."""
    exact = Fraction(n_slices) * Fraction(repr(float(r_percent))) / 100
    return max(1, math.ceil(exact))


def sample_indices(n_slices: int, cfg: SamplerConfig) -> np.ndarray:
    """Sorted, distinct slice indices drawn uniformly without replacement."""
    if n_slices < 1:
        raise ValueError("scan has no slices")
    k = sample_size(n_slices, cfg.r_percent)
    if k >= n_slices:
        return np.arange(n_slices, dtype=np.int64)
    return _kernels.sample_without_replacement(n_slices, k, cfg.seed)


def derive_seed(seed: int, key) -> int:
    """Mix a global seed with a key (e.g. a series UID) into a 64-bit seed."""
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    h = int.from_bytes(digest, "little")
    return _kernels.splitmix64_next((seed ^ h) & _kernels.MASK64)[1]


@dataclass
class ScanPrediction:
    phase: PhaseLabel
    vote_counts: tuple
    sampled_indices: tuple
    probs: np.ndarray = field(repr=False)
    series_uid: str = ""
    study_uid: str = ""
    seed: int = 0

    @property
    def k_sampled(self) -> int:
        return len(self.sampled_indices)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ScanPrediction):
            return NotImplemented
        return (
            (self.phase, self.vote_counts, self.sampled_indices, self.series_uid, self.study_uid, self.seed)
            == (other.phase, other.vote_counts, other.sampled_indices, other.series_uid, other.study_uid, other.seed)
            and np.array_equal(self.probs, other.probs)
        )


def vote(probs, sampled_indices: Optional[Sequence[int]] = None) -> ScanPrediction:
    """Majority vote over slice argmaxes.

    Slice ties go to the lowest class ordinal.  Scan-level ties go to the
    tied class with the largest summed score, then the lowest ordinal.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0 or probs.shape[1] != N_CLASSES:
        raise ValueError(f"need a nonempty (k, {N_CLASSES}) score matrix, got {probs.shape}")
    counts = np.bincount(probs.argmax(axis=1), minlength=N_CLASSES)
    tied = np.flatnonzero(counts == counts.max())
    if tied.size > 1:
        sums = probs[:, tied].sum(axis=0)
        tied = tied[sums == sums.max()]
    if sampled_indices is None:
        sampled_indices = range(probs.shape[0])
    return ScanPrediction(
        phase=PhaseLabel(int(tied[0])),
        vote_counts=tuple(int(c) for c in counts),
        sampled_indices=tuple(int(i) for i in sampled_indices),
        probs=probs,
    )


def classify_slices(volume, indices, params: LinearModelParams, window: WindowSpec = DEFAULT_WINDOW,
                    features: FeatureConfig = DEFAULT_FEATURES) -> np.ndarray:
    """Preprocess and score the given slices; one classifier call per slice."""
    return predict_batch(params, volume_features(volume, indices, window, features))


def predict_scan(scan: CtScan, params: LinearModelParams, cfg: SamplerConfig = SamplerConfig(),
                 window: WindowSpec = DEFAULT_WINDOW, features: FeatureConfig = DEFAULT_FEATURES) -> ScanPrediction:
    scan_seed = derive_seed(cfg.seed, scan.series_uid)
    idx = sample_indices(len(scan), SamplerConfig(cfg.r_percent, scan_seed))
    pred = vote(classify_slices(scan.volume, idx, params, window, features), idx)
    pred.series_uid = scan.series_uid
    pred.study_uid = scan.study_uid
    pred.seed = cfg.seed
    return pred


def predict_scans(scans: Iterable[CtScan], params: LinearModelParams, cfg: SamplerConfig = SamplerConfig(),
                  window: WindowSpec = DEFAULT_WINDOW, features: FeatureConfig = DEFAULT_FEATURES) -> list:
    preds = [predict_scan(s, params, cfg, window, features) for s in scans]
    return sorted(preds, key=lambda p: p.series_uid)


@dataclass(frozen=True)
class SweepRow:
    r_percent: float
    mean_f1: float
    lower: float
    upper: float
    seeds: int
    mean_k: float


def vote_from_cache(all_probs: np.ndarray, series_uid: str, r_percent: float, seed: int) -> PhaseLabel:
    """Scan phase from precomputed per-slice scores (same result as predict_scan)."""
    idx = sample_indices(all_probs.shape[0], SamplerConfig(r_percent, derive_seed(seed, series_uid)))
    return vote(all_probs[idx], idx).phase


def r_sweep(scans: Sequence[CtScan], params: LinearModelParams, r_values: Sequence[float] = DEFAULT_R_GRID,
            seeds: int = 100, window: WindowSpec = DEFAULT_WINDOW, features: FeatureConfig = DEFAULT_FEATURES,
            base_seed: int = 0, level: float = 0.95, slice_probs: Optional[Sequence[np.ndarray]] = None) -> list:
    """Scan-level macro F1 per R, averaged over sampler seeds.

    The interval is the percentile spread of per-seed F1 at ``level``.
    Slice scores are computed once per scan (or taken from ``slice_probs``)
    and reused across R and seeds; the classifier is deterministic, so
    this equals running ``predict_scan`` every time.
    """
    if not r_values:
        raise ValueError("r_values must not be empty")
    if seeds < 1:
        raise ValueError("seeds must be >= 1")
    truth = [s.label for s in scans]
    if any(t is None for t in truth):
        raise ValueError("every scan needs a label for the sweep")
    if slice_probs is None:
        slice_probs = [classify_slices(s.volume, range(len(s)), params, window, features) for s in scans]
    tail = (1 - level) / 2 * 100
    rows = []
    for r in r_values:
        SamplerConfig(r)  # validates the range
        f1s = []
        for s in range(seeds):
            seed = base_seed + s
            pred = [vote_from_cache(p, sc.series_uid, r, seed) for p, sc in zip(slice_probs, scans)]
            f1s.append(macro_metrics(confusion(truth, pred)).macro_f1)
        f1s = np.asarray(f1s)
        ks = [sample_size(len(sc), r) for sc in scans]
        rows.append(SweepRow(
            r_percent=float(r),
            mean_f1=float(f1s.mean()),
            lower=float(np.percentile(f1s, tail)),
            upper=float(np.percentile(f1s, 100 - tail)),
            seeds=seeds,
            mean_k=float(np.mean(ks)),
        ))
    return rows


# --------------------------------------------------------------------------
# prediction CSV
# --------------------------------------------------------------------------


def write_predictions(fh, preds: Iterable[ScanPrediction]) -> None:
    """Write one row per scan to an open text file."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(PREDICTION_FIELDS)
    for p in preds:
        w.writerow([p.series_uid, p.study_uid, p.phase.slug, *p.vote_counts, p.k_sampled, p.seed])


@dataclass(frozen=True)
class PredictionRow:
    series_uid: str
    study_uid: str
    phase: PhaseLabel
    vote_counts: tuple
    k_sampled: int
    seed: int


def read_predictions(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in PREDICTION_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"{path}: header lacks column(s) {', '.join(missing)}")
        for line_no, rec in enumerate(reader, start=2):
            try:
                votes = tuple(int(rec[f]) for f in PREDICTION_FIELDS[3:7])
                row = PredictionRow(rec["series_uid"], rec["study_uid"], PhaseLabel.from_slug(rec["predicted_phase"]),
                                    votes, int(rec["k_sampled"]), int(rec["seed"]))
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"{path}:{line_no}: {exc}") from None
            if sum(votes) != row.k_sampled:
                raise SchemaError(f"{path}:{line_no}: votes sum to {sum(votes)}, k_sampled is {row.k_sampled}")
            rows.append(row)
    return rows
