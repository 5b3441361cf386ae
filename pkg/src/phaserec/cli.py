"""Command line front end: anonymize, synth, train, predict, evaluate, sweep, bench."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .core import PhaseLabel
from .dicom import (
    DEFAULT_WHITELIST, EXPLICIT_VR_LE, TRANSFER_SYNTAX_UID, DicomDataset, DicomElement, DicomError,
    anonymize, iter_tree, load_scans, read_whitelist, write_fixture,
)
from .evaluate import EvalReport, SchemaError, level_report, read_labels, study_split
from .model import LinearModelParams, ModelFileError, TrainConfig, load_model, save_model, train_arrays
from .pipeline import (
    DEFAULT_R_GRID, SamplerConfig, classify_slices, predict_scan, r_sweep, read_predictions,
    vote_from_cache, write_predictions,
)
from .preprocess import FeatureConfig, WindowSpec, volume_features

log = logging.getLogger("phaserec")


class CliError(Exception):
    pass


def _common(p: argparse.ArgumentParser, r: bool = False, resamples: bool = False) -> None:
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    p.add_argument("--window-center", type=float, default=50.0, help="HU window center (default 50)")
    p.add_argument("--window-width", type=float, default=400.0, help="HU window width (default 400)")
    p.add_argument("--resolution", type=int, default=128, help="working image size (default 128)")
    p.add_argument("--workers", type=int, default=1, help="scan-parallel worker processes")
    if r:
        p.add_argument("--r", type=float, default=30.0, help="percent of slices sampled per scan (default 30)")
    if resamples:
        p.add_argument("--resamples", type=int, default=5000, help="bootstrap resamples (default 5000)")


def _split_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split", choices=("all", "train", "test"), default="all",
                   help="restrict to one side of a study-level split of the labels")
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--split-seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phaserec", description=__doc__)
    parser.add_argument("--version", action="version", version=f"phaserec {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("anonymize", help="strip every DICOM element not on the whitelist")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--whitelist", type=Path, help="file with one tag per line, e.g. (0010,0010)")

    p = sub.add_parser("synth", help="write a synthetic phantom DICOM tree and labels.csv")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--studies", type=int, default=40)
    p.add_argument("--scans-per-study", type=int, default=3)
    p.add_argument("--min-slices", type=int, default=30)
    p.add_argument("--max-slices", type=int, default=80)
    p.add_argument("--dims", type=int, default=64)
    p.add_argument("--noise", type=float, default=15.0, help="pixel noise sigma in HU")
    p.add_argument("--uninformative", type=float, default=0.0, help="fraction of slices without contrast regions")
    p.add_argument("--label-noise", type=float, default=0.0, help="probability a slice shows another phase")
    p.add_argument("--with-phi", action="store_true", help="add fake patient identifiers")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train the slice classifier")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--labels", type=Path)
    p.add_argument("--model", type=Path, required=True, help="output model file")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--warmup-steps", type=int, default=None, help="default: one epoch")
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--grid", type=int, default=2, choices=(1, 2))
    _split_args(p)
    _common(p)

    p = sub.add_parser("predict", help="scan-level phase prediction to CSV")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--labels", type=Path, help="optional; needed only with --split")
    _split_args(p)
    _common(p, r=True)

    p = sub.add_parser("evaluate", help="slice- and scan-level metrics with bootstrap CIs and AUCs")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--labels", type=Path)
    p.add_argument("--output", type=Path, required=True, help="report file (JSON)")
    p.add_argument("--predictions", type=Path, help="score this prediction CSV instead of re-predicting")
    p.add_argument("--sweep", action="store_true", help="include an R sweep table")
    p.add_argument("--r-values", default=None)
    p.add_argument("--sweep-seeds", type=int, default=100)
    _split_args(p)
    _common(p, r=True, resamples=True)

    p = sub.add_parser("sweep", help="scan-level macro F1 as a function of R")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--labels", type=Path)
    p.add_argument("--output", type=Path, required=True, help="sweep table (CSV)")
    p.add_argument("--r-values", default=None, help="comma-separated; default 1,5,10,15,20,30,...,100")
    p.add_argument("--seeds", type=int, default=100)
    _split_args(p)
    _common(p)

    p = sub.add_parser("bench", help="per-scan latency and classifier calls for several R")
    p.add_argument("--input", type=Path, help="DICOM tree; omit to benchmark synthetic scans")
    p.add_argument("--model", type=Path, help="model file; default is an all-zero model")
    p.add_argument("--r-values", default="30,100")
    p.add_argument("--synth-scans", type=int, default=50)
    p.add_argument("--synth-slices", type=int, default=300)
    p.add_argument("--synth-dims", type=int, default=64)
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--output", type=Path, help="optional CSV copy of the table")
    _common(p)
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _window(args) -> WindowSpec:
    try:
        return WindowSpec(args.window_center, args.window_width)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _features(args, params: LinearModelParams | None = None) -> FeatureConfig:
    bins = params.bins if params is not None else getattr(args, "bins", 32)
    grid = params.grid if params is not None else getattr(args, "grid", 2)
    try:
        return FeatureConfig(bins, grid, args.resolution)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _r_values(text, default=DEFAULT_R_GRID) -> list:
    if text is None:
        return list(default)
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"bad R list {text!r}") from None
    if not vals or any(not 0 < v <= 100 for v in vals):
        raise CliError("R values must lie in (0, 100]")
    return vals


def _require_dir(path: Path, what: str) -> None:
    if not path.is_dir():
        raise CliError(f"{what} {path} is not a directory")


def _load_model(path: Path) -> LinearModelParams:
    if not path.is_file():
        raise CliError(f"model file {path} not found")
    try:
        return load_model(path.read_bytes())
    except ModelFileError as exc:
        raise CliError(f"{path}: {exc}") from None


def _labels_path(args) -> Path | None:
    if args.labels is not None:
        return args.labels
    default = args.input / "labels.csv"
    return default if default.is_file() else None


def _load_labeled(args, need_labels: bool = True) -> list:
    """Scans under --input, labels attached, restricted to the chosen split."""
    _require_dir(args.input, "input")
    labels_path = _labels_path(args)
    labels = None
    if labels_path is not None:
        if not labels_path.is_file():
            raise CliError(f"labels file {labels_path} not found")
        labels = read_labels(labels_path)
    elif need_labels or args.split != "all":
        raise CliError("a labels CSV is required (--labels, or labels.csv in the input directory)")

    skipped = []
    scans = load_scans(args.input, {r.series_uid: r.phase for r in labels} if labels else None, skipped)
    for path, err in skipped:
        if path.suffix == ".dcm":
            log.warning("skipping %s: %s", path, err)
    if not scans:
        raise CliError(f"no DICOM series found under {args.input}")

    if labels is not None:
        by_uid = {s.series_uid: s for s in scans}
        missing = [r.series_uid for r in labels if r.series_uid not in by_uid]
        if missing:
            raise CliError(f"{labels_path}: {len(missing)} labelled series not found, e.g. {missing[0]}")
        if args.split != "all":
            train, test = study_split(labels, args.train_fraction, args.split_seed)
            keep = {r.series_uid for r in (train if args.split == "train" else test)}
            scans = [s for s in scans if s.series_uid in keep]
        if need_labels:
            scans = [s for s in scans if s.label is not None]
    return scans


def _predict_job(job):
    scan, params, cfg, window, features = job
    return predict_scan(scan, params, cfg, window, features)


def _map(fn, jobs, workers: int) -> list:
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_anonymize(args) -> int:
    _require_dir(args.input, "input")
    whitelist = DEFAULT_WHITELIST
    if args.whitelist is not None:
        try:
            whitelist = read_whitelist(args.whitelist.read_text().splitlines())
        except (OSError, ValueError) as exc:
            raise CliError(f"{args.whitelist}: {exc}") from None
    processed = stripped = skipped = 0
    for path, ds, err in iter_tree(args.input):
        if ds is None:
            log.warning("skipping %s: %s", path, err)
            skipped += 1
            continue
        out = anonymize(ds, whitelist)
        out = DicomDataset(out.elements, EXPLICIT_VR_LE)
        if TRANSFER_SYNTAX_UID in out:
            out = out.replace(DicomElement.from_value(TRANSFER_SYNTAX_UID, "UI", EXPLICIT_VR_LE))
        target = args.output / path.relative_to(args.input)
        target.parent.mkdir(parents=True, exist_ok=True)
        try:
            target.write_bytes(write_fixture(out))
        except DicomError as exc:
            raise CliError(f"{path}: cannot write anonymized copy: {exc}") from None
        processed += 1
        stripped += len(ds) - len(out)
    if processed == 0:
        raise CliError(f"no parseable DICOM files under {args.input}")
    print(f"files processed: {processed}")
    print(f"files skipped: {skipped}")
    print(f"tags stripped: {stripped}")
    return 0


def cmd_synth(args) -> int:
    from .synth import PhantomConfig, export_dicom, iter_dataset

    try:
        cfg = PhantomConfig(
            min_slices=args.min_slices, max_slices=args.max_slices, dims=args.dims, noise_sigma=args.noise,
            uninformative_fraction=args.uninformative, slice_label_noise=args.label_noise, seed=args.seed,
        )
        summary = export_dicom(iter_dataset(cfg, args.studies, args.scans_per_study), args.output, args.with_phi)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    print(f"wrote {summary.n_files} files for {summary.n_scans} scans; labels in {summary.labels_path}")
    return 0


def cmd_train(args) -> int:
    scans = _load_labeled(args)
    window, features = _window(args), _features(args)
    x = np.concatenate([volume_features(s.volume, None, window, features) for s in scans])
    y = np.concatenate([np.full(len(s), int(s.label)) for s in scans])
    try:
        cfg = TrainConfig(base_lr=args.lr, epochs=args.epochs, warmup_steps=args.warmup_steps,
                          batch_size=args.batch_size, seed=args.seed)
        result = train_arrays(x, y, cfg, features.bins, features.grid)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    for epoch, loss in enumerate(result.epoch_losses, start=1):
        print(f"epoch {epoch:3d}  loss {loss:.6f}")
    args.model.parent.mkdir(parents=True, exist_ok=True)
    args.model.write_bytes(save_model(result.params))
    print(f"trained on {x.shape[0]} slices from {len(scans)} scans in {result.n_steps} steps -> {args.model}")
    return 0


def cmd_predict(args) -> int:
    params = _load_model(args.model)
    scans = _load_labeled(args, need_labels=False)
    window, features = _window(args), _features(args, params)
    try:
        cfg = SamplerConfig(args.r, args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    preds = _map(_predict_job, [(s, params, cfg, window, features) for s in scans], args.workers)
    preds.sort(key=lambda p: p.series_uid)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    with open(args.output, "w", newline="") as fh:
        write_predictions(fh, preds)
    print(f"predicted {len(preds)} scans -> {args.output}")
    return 0


def cmd_evaluate(args) -> int:
    params = _load_model(args.model)
    scans = _load_labeled(args)
    window, features = _window(args), _features(args, params)

    slice_probs = [classify_slices(s.volume, range(len(s)), params, window, features) for s in scans]
    slice_truth = np.concatenate([np.full(len(s), int(s.label)) for s in scans])
    slice_scores = np.concatenate(slice_probs)
    slice_level = level_report(slice_truth, slice_scores.argmax(axis=1), slice_scores,
                               args.resamples, seed=args.seed)

    truth = {s.series_uid: s.label for s in scans}
    if args.predictions is not None:
        rows = [r for r in read_predictions(args.predictions) if r.series_uid in truth]
        if len(rows) != len(truth):
            raise CliError(f"{args.predictions}: covers {len(rows)} of {len(truth)} evaluated scans")
        scan_pred = {r.series_uid: r.phase for r in rows}
        scan_scores = {r.series_uid: np.asarray(r.vote_counts) / r.k_sampled for r in rows}
    else:
        preds = [predict_scan(s, params, SamplerConfig(args.r, args.seed), window, features) for s in scans]
        scan_pred = {p.series_uid: p.phase for p in preds}
        scan_scores = {p.series_uid: np.asarray(p.vote_counts) / p.k_sampled for p in preds}
    uids = sorted(truth)
    scan_level = level_report([truth[u] for u in uids], [scan_pred[u] for u in uids],
                              np.stack([scan_scores[u] for u in uids]), args.resamples, seed=args.seed)

    sweep = []
    if args.sweep:
        sweep = r_sweep(scans, params, _r_values(args.r_values), args.sweep_seeds, window, features,
                        base_seed=args.seed, slice_probs=slice_probs)
    report = EvalReport(slice_level, scan_level, args.r, args.seed, sweep)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    args.output.write_text(report.to_json())
    print(f"slice macro F1 {slice_level.metrics['macro_f1']:.4f}  "
          f"scan macro F1 {scan_level.metrics['macro_f1']:.4f}  -> {args.output}")
    return 0


def cmd_sweep(args) -> int:
    params = _load_model(args.model)
    scans = _load_labeled(args)
    window, features = _window(args), _features(args, params)
    rows = r_sweep(scans, params, _r_values(args.r_values), args.seeds, window, features, base_seed=args.seed)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["r_percent", "mean_macro_f1", "ci_lower", "ci_upper", "seeds", "mean_k"])
        for r in rows:
            w.writerow([f"{r.r_percent:g}", f"{r.mean_f1:.6f}", f"{r.lower:.6f}", f"{r.upper:.6f}",
                        r.seeds, f"{r.mean_k:.2f}"])
    for r in rows:
        print(f"R={r.r_percent:5g}%  macro F1 {r.mean_f1:.4f}  [{r.lower:.4f}, {r.upper:.4f}]")
    return 0


def cmd_bench(args) -> int:
    from .bench import backend, bench_latency

    window = _window(args)
    if args.model is not None:
        params = _load_model(args.model)
        features = _features(args, params)
    else:
        features = _features(args)
        params = LinearModelParams.zeros(features.dim, features.bins, features.grid)
    r_values = _r_values(args.r_values)
    if args.input is not None:
        _require_dir(args.input, "input")
        loaded = load_scans(args.input)
        if not loaded:
            raise CliError(f"no DICOM series found under {args.input}")
        def source():
            return loaded
    else:
        from .synth import PhantomConfig, iter_dataset

        n_studies = max(2, args.synth_scans)
        cfg = PhantomConfig(min_slices=args.synth_slices, max_slices=args.synth_slices,
                            dims=args.synth_dims, seed=args.seed)

        def source():
            return (s for i, s in zip(range(args.synth_scans), iter_dataset(cfg, n_studies, 1)))
    rows = bench_latency(source, params, r_values, args.seed, window, features, args.repeats)
    header = ["r_percent", "n_scans", "mean_seconds_per_scan", "classifier_calls_per_scan", "speedup_vs_r100"]
    print(f"backend: {backend()}")
    print("  ".join(header))
    table = []
    for r in rows:
        line = [f"{r.r_percent:g}", str(r.n_scans), f"{r.mean_seconds:.6f}", f"{r.calls_per_scan:g}",
                f"{r.speedup_vs_full:.2f}"]
        table.append(line)
        print("  ".join(line))
    if args.output is not None:
        with open(args.output, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(table)
    return 0


COMMANDS = {
    "anonymize": cmd_anonymize,
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CliError, SchemaError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
