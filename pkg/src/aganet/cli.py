"""Command-line entry point: ``aganet gen|train|eval|stream|roi``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import warnings
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config
from .geometry import extract_roi, read_map_csv
from .model import WEIGHTS_VERSION, WeightsFormatError, count_params, load_weights, save_weights
from .pipeline import REPORT_FORMAT_VERSION, evaluate
from .stream import StreamEngine
from .synth import (DATASET_FORMAT_VERSION, JOINTS, DatasetFormatError, generate_dataset,
                    parse_frame_row, read_dataset, read_manifest, write_dataset)
from .training import build_training_set, train, write_loss_log

logger = logging.getLogger("aganet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _versions() -> str:
    return (f"aganet {__version__} (weights format {WEIGHTS_VERSION}, dataset format "
            f"{DATASET_FORMAT_VERSION}, report format {REPORT_FORMAT_VERSION})")


def _config(args, overrides):
    return load_config(args.config, {k: v for k, v in overrides.items() if v is not None})


def _load_store(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"weights file not found: {path}")
    try:
        return load_weights(path)
    except WeightsFormatError as exc:
        raise DataError(str(exc)) from None


def _records(dataset, split):
    root = Path(dataset)
    if not (root / "manifest.json").is_file():
        raise DataError(f"dataset not found: {root} (no manifest.json)")
    manifest = read_manifest(root)
    if split and split in manifest.get("splits", {}):
        return read_dataset(root, split)
    if split:
        logger.warning("manifest has no %r split; using every stream", split)
    return read_dataset(root)


def cmd_gen(args):
    cfg = _config(args, {
        "paths.dataset": args.out, "gen.subjects": args.subjects,
        "gen.streams_per_subject": args.streams_per_subject,
        "gen.test_subjects": args.test_subjects, "gen.instances": args.instances,
        "gen.seed": args.seed})
    g = cfg.gen
    if g.subjects == 0:
        logger.warning("0 subjects requested; writing an empty manifest")
    test = None if g.test_subjects < 0 else g.test_subjects
    records, splits, subjects = generate_dataset(g.subjects, g.streams_per_subject, g.seed,
                                                 g.instances, test)
    try:
        path = write_dataset(cfg.dataset, records, splits, subjects)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {cfg.dataset}: {exc}") from None
    print(json.dumps({"manifest": str(path), "streams": len(records),
                      "train_subjects": splits["train"], "test_subjects": splits["test"]}))
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args, {
        "paths.dataset": args.dataset, "paths.weights": args.weights,
        "train.epochs": args.epochs, "train.batch_size": args.batch_size,
        "train.sample_stride": args.sample_stride, "train.seed": args.seed,
        "model.enable_lsta": "false" if args.no_lsta else None,
        "model.enable_gsa": "false" if args.no_gsa else None})
    tc = cfg.train
    print(f"trainable parameters: {count_params(tc.model)}", flush=True)
    records = _records(cfg.dataset, "train")
    samples = build_training_set(records, tc.model.window_len, tc.sample_stride)
    if not samples:
        raise DataError(f"no training windows in {cfg.dataset}")
    store = None
    weights = Path(cfg.weights)
    if args.resume and weights.is_file():
        store = _load_store(weights)
        if store.config != tc.model:
            raise DataError(f"{weights}: model config differs from the requested one")
        done = store.adam.epochs_done if store.adam is not None else 0
        tc = dataclasses.replace(tc, epochs=max(tc.epochs - done, 0))
        logger.info("resuming from epoch %d", done)
    log_path = Path(args.log) if args.log else Path(cfg.reports) / "train_log.csv"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    previous = []
    if args.resume and log_path.is_file():
        with open(log_path, newline="") as fh:
            previous = [{"epoch": int(r["epoch"]), "mean_loss": float(r["mean_loss"]),
                         "wallclock_s": float(r["wallclock_s"])} for r in csv.DictReader(fh)]

    log = []

    def progress(row):
        log.append(row)
        write_loss_log(previous + log, log_path)

    store, _ = train(samples, tc, seed=cfg.seed, store=store, progress=progress)
    weights.parent.mkdir(parents=True, exist_ok=True)
    save_weights(store, weights)
    write_loss_log(previous + log, log_path)
    print(json.dumps({"weights": str(weights), "log": str(log_path),
                      "epochs": len(previous) + len(log),
                      "final_loss": log[-1]["mean_loss"] if log else None}))
    return EXIT_OK


def cmd_eval(args):
    cfg = _config(args, {"paths.dataset": args.dataset, "paths.weights": args.weights,
                         "eval.split": args.split, "stream.stride": args.stride})
    store = _load_store(cfg.weights)
    records = _records(cfg.dataset, cfg.eval.split)
    if not records:
        raise DataError(f"no streams in split {cfg.eval.split!r} of {cfg.dataset}")
    params = cfg.stream.accumulator_params(store.config.num_categories)
    report, points = evaluate(store, records, params, cfg.stream.stride, cfg.eval.thresholds,
                              cfg.eval.headline_threshold, cfg.eval.extend_frac)
    report["split"] = cfg.eval.split
    report_path = Path(args.report) if args.report else Path(cfg.reports) / "eval_report.json"
    pr_path = Path(args.pr_csv) if args.pr_csv else report_path.with_name("pr_points.csv")
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(report, indent=1, sort_keys=True))
    with open(pr_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall"])
        for p in points:
            w.writerow([p.threshold, repr(p.precision), repr(p.recall)])
    print(json.dumps({"AP_trig": report["AP_trig"], "mean_cAP": report["mean_cAP"],
                      "P_trig": report["P_trig"], "R_trig": report["R_trig"],
                      "report": str(report_path), "pr_csv": str(pr_path)}))
    return EXIT_OK


def iter_frames(lines, source="<stdin>"):
    """Parse a line-delimited frame feed, skipping headers and malformed lines."""
    n_fields = 1 + 3 * len(JOINTS)
    for line_no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("frame"):
            continue
        row = next(csv.reader([line]))
        if len(row) == n_fields - 1:
            row = ["0"] + row
        try:
            yield parse_frame_row(row, line_no, source)
        except DatasetFormatError as exc:
            logger.warning("skipping malformed line: %s", exc)


def cmd_stream(args):
    """Emit trigger events as JSON lines.

    Algorithmic delay is below T - (T - stride) // 2 frames (60 frames, 2 s at
    30 fps, for T=100 and stride 20) once the first window's middle has
    passed; earlier frames wait for the first window, up to T - 1 frames. The
    final frames of a stream are resolved when the input ends.
    """
    cfg = _config(args, {"paths.weights": args.weights, "stream.stride": args.stride,
                         "stream.threshold": args.threshold})
    store = _load_store(cfg.weights)
    engine = StreamEngine(store, cfg.stream.stride, cfg.stream.threshold,
                          cfg.stream.accumulator_params(store.config.num_categories))
    out = sys.stdout

    def emit(events):
        for ev in events:
            out.write(json.dumps(ev.to_json()) + "\n")
        out.flush()

    if args.input in (None, "-"):
        source, fh = "<stdin>", sys.stdin
    else:
        path = Path(args.input)
        if not path.is_file():
            raise DataError(f"input stream not found: {path}")
        source, fh = str(path), open(path)
    try:
        for frame in iter_frames(fh, source):
            emit(engine.push(frame))
    finally:
        if fh is not sys.stdin:
            fh.close()
    emit(engine.finish())
    return EXIT_OK


def cmd_roi(args):
    cfg = _config(args, {"roi.bin_threshold": args.threshold, "roi.src_width": args.src_width,
                         "roi.src_height": args.src_height})
    try:
        amap = read_map_csv(args.map)
    except FileNotFoundError:
        raise DataError(f"attention map not found: {args.map}") from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    roi = extract_roi(amap, cfg.roi.bin_threshold, (cfg.roi.src_width, cfg.roi.src_height))
    print(json.dumps({"roi": roi.to_json() if roi else None}))
    return EXIT_OK


def build_parser():
    p = _Parser(prog="aganet", description="Streaming skeleton action recognition.")
    p.add_argument("--version", action="version", version=_versions())
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key/value configuration file (docs/config.md)")
        return sp

    g = common(sub.add_parser("gen", help="generate a synthetic dataset"))
    g.add_argument("--out", help="dataset directory")
    g.add_argument("--subjects", type=int)
    g.add_argument("--streams-per-subject", type=int)
    g.add_argument("--test-subjects", type=int)
    g.add_argument("--instances", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    t = common(sub.add_parser("train", help="train AGANet on the train split"))
    t.add_argument("--dataset")
    t.add_argument("--weights")
    t.add_argument("--log", help="per-epoch loss CSV")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--sample-stride", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true", help="continue from saved weights/Adam state")
    t.add_argument("--no-lsta", action="store_true")
    t.add_argument("--no-gsa", action="store_true")
    t.set_defaults(func=cmd_train)

    e = common(sub.add_parser("eval", help="evaluate weights on a split"))
    e.add_argument("--dataset")
    e.add_argument("--weights")
    e.add_argument("--split")
    e.add_argument("--stride", type=int)
    e.add_argument("--report", help="output JSON report")
    e.add_argument("--pr-csv", help="output CSV of PR points")
    e.set_defaults(func=cmd_eval)

    s = common(sub.add_parser(
        "stream", help="online trigger events as JSON lines",
        description=cmd_stream.__doc__, formatter_class=argparse.RawDescriptionHelpFormatter))
    s.add_argument("--weights")
    s.add_argument("--input", help="stream CSV, or '-' for a live feed on stdin (default)")
    s.add_argument("--stride", type=int)
    s.add_argument("--threshold", type=float)
    s.set_defaults(func=cmd_stream)

    r = common(sub.add_parser("roi", help="ROI of an attention map CSV"))
    r.add_argument("--map", required=True)
    r.add_argument("--threshold", type=float)
    r.add_argument("--src-width", type=int)
    r.add_argument("--src-height", type=int)
    r.set_defaults(func=cmd_roi)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    loggers = [logger, logging.getLogger("py.warnings")]
    for lg in loggers:
        lg.addHandler(handler)
        lg.setLevel(logging.INFO if args.verbose else logging.WARNING)
        lg.propagate = False
    logging.captureWarnings(True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            return args.func(args)
    except ConfigError as exc:
        print(f"aganet: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DatasetFormatError, FileNotFoundError) as exc:
        print(f"aganet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"aganet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        logging.captureWarnings(False)
        for lg in loggers:
            lg.removeHandler(handler)


if __name__ == "__main__":
    sys.exit(main())
