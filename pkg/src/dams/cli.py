"""Command-line surface: synth, train, eval, score, plot, gradcheck, info.

Exit codes (machine-readable error categories):
    0  success
    2  configuration error (bad config file, bad flag combination)
    3  missing input path
    4  file-format error (feature files, checkpoints)
    5  numeric failure (non-finite loss, failed gradient check, undefined metric)
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .amtpn import ConfigError
from .checks import run_suite
from .data import (FEATURE_VERSION, FeatureFileError, SyntheticSpec,
                   load_dataset, save_dataset, synthesize_dataset)
from .kernel import GradCheckAborted
from .losses import NonFiniteLossError
from .metrics import UndefinedMetricError
from .model import ModelConfig
from .plotting import render_score_svg
from .trainer import (CHECKPOINT_VERSION, TrainConfig, config_from_dict,
                      config_to_dict, evaluate, load_model_for_inference,
                      score_video, train)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5

log = logging.getLogger("dams")


def _setup_logging():
    level = os.environ.get("DAMS_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _split_train_val(records, val_fraction):
    n = len(records)
    n_val = max(1, round(val_fraction * n)) if n > 1 else 0
    val_idx = set(np.unique(np.linspace(0, n - 1, n_val).round().astype(int))) \
        if n_val else set()
    train_recs = [r for i, r in enumerate(records) if i not in val_idx]
    val_recs = [r for i, r in enumerate(records) if i in val_idx]
    return train_recs, val_recs


def _load_train_config(args, records):
    if args.config is not None:
        with open(args.config, encoding="utf-8") as fh:
            cfg = config_from_dict(json.load(fh))
    else:
        model = ModelConfig(input_dim=records[0].input_dim)
        cfg = TrainConfig(model=model)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.iters is not None:
        over["max_iterations"] = args.iters
    if args.batch_size is not None:
        over["batch_size"] = args.batch_size
    if args.no_l_pse:
        over["use_l_pse"] = False
    if args.no_l_trip:
        over["use_l_trip"] = False
    model_over = {}
    for switch in ("amtpn", "cbam", "ca", "sa", "aff", "tce", "tpp"):
        if getattr(args, f"no_{switch}"):
            model_over[f"use_{switch}"] = False
    if model_over:
        over["model"] = dataclasses.replace(cfg.model, **model_over)
    return dataclasses.replace(cfg, **over) if over else cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    spec = SyntheticSpec(
        num_videos=args.videos, t_min=args.t_min, t_max=args.t_max,
        input_dim=args.dim, anomaly_fraction=args.anomaly_fraction,
        snr=args.snr, label_noise=args.label_noise, num_crops=args.crops,
        seed=args.seed)
    records = synthesize_dataset(spec)
    save_dataset(records, args.out)
    spec_path = Path(args.out) / "spec.json"
    with open(spec_path, "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(spec), fh, sort_keys=True, indent=2)
    print(f"wrote {len(records)} videos to {args.out}")
    return EXIT_OK


def cmd_train(args):
    records = load_dataset(args.dataset)
    cfg = _load_train_config(args, records)
    train_recs, val_recs = _split_train_val(records, args.val_fraction)
    result = train(cfg, train_recs, val_recs or None, out_dir=args.out,
                   resume=args.resume)
    if np.isfinite(result.best_auc):
        best = f"best val AUC {result.best_auc:.4f} at iteration {result.best_iteration}"
    else:
        best = "no validation pass ran"
    print(f"trained {cfg.max_iterations} iterations; {best}")
    return EXIT_OK


def cmd_eval(args):
    records = load_dataset(args.dataset)
    model, _, _ = load_model_for_inference(args.checkpoint)
    report = evaluate(model, records)
    payload = json.dumps(report.to_dict(), sort_keys=True)
    if args.out is not None:
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    print(f"auc {report.auc:.6f} ap {report.ap:.6f}")
    if args.csv is not None:
        _write_score_csv(args.csv, records, model)
    return EXIT_OK


def _write_score_csv(path, records, model):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["video_id", "frame", "score", "gt"])
        for rec in records:
            scores = score_video(model, rec)
            for t, s in enumerate(scores):
                gt = "" if rec.frame_gt is None else int(rec.frame_gt[t])
                writer.writerow([rec.id, t, f"{s:.10f}", gt])


def cmd_score(args):
    records = load_dataset(args.dataset)
    model, _, _ = load_model_for_inference(args.checkpoint)
    _write_score_csv(args.out, records, model)
    print(f"wrote per-frame scores for {len(records)} videos to {args.out}")
    return EXIT_OK


def cmd_plot(args):
    rows = {}
    with open(args.scores, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            vid = row["video_id"]
            entry = rows.setdefault(vid, {"scores": [], "gt": []})
            entry["scores"].append(float(row["score"]))
            entry["gt"].append(int(row["gt"]) if row["gt"] != "" else 0)
    if not rows:
        raise ConfigError(f"{args.scores}: no score rows")
    if args.video is not None:
        if args.video not in rows:
            raise ConfigError(f"video {args.video!r} not present in {args.scores}")
        selected = [args.video]
    else:
        selected = list(rows)[:args.max_videos]
    videos = [(vid, [("model", np.asarray(rows[vid]["scores"]))],
               np.asarray(rows[vid]["gt"])) for vid in selected]
    Path(args.out).write_text(render_score_svg(videos), encoding="utf-8")
    print(f"wrote {len(selected)} panels to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    seeds = tuple(range(args.seed, args.seed + args.num_seeds))
    results = run_suite(seeds=seeds, tolerance=args.tolerance,
                        max_entries_per_param=args.entries)
    failed = 0
    by_name = {}
    for r in results:
        by_name.setdefault(r.name, []).append(r)
    for name, rs in by_name.items():
        worst = max(r.max_rel_error for r in rs)
        ok = all(r.passed for r in rs)
        failed += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'} {name:14s} max rel err {worst:.3e}")
    if failed:
        raise GradCheckAborted(f"{failed} gradient checks failed")
    return EXIT_OK


def cmd_info(args):
    if args.config is not None:
        with open(args.config, encoding="utf-8") as fh:
            cfg = config_from_dict(json.load(fh))
    else:
        cfg = TrainConfig(model=ModelConfig(input_dim=64))
    info = {"version": __version__,
            "feature_file_version": FEATURE_VERSION,
            "checkpoint_version": CHECKPOINT_VERSION,
            "config": config_to_dict(cfg)}
    print(json.dumps(info, sort_keys=True, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="dams",
        description="Multiscale temporal anomaly detection: synthetic "
                    "benchmark, training, evaluation, and diagnostics.",
        epilog="Exit codes: 0 ok, 2 config error, 3 missing path, "
               "4 file-format error, 5 numeric failure. "
               "Set DAMS_LOG=error|warn|info|debug for log verbosity.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic planted-anomaly dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos", type=int, default=200)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--t-min", type=int, default=64)
    p.add_argument("--t-max", type=int, default=128)
    p.add_argument("--anomaly-fraction", type=float, default=0.5)
    p.add_argument("--snr", type=float, default=3.0)
    p.add_argument("--label-noise", type=float, default=0.1)
    p.add_argument("--crops", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON training config (strict schema)")
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--resume", help="checkpoint to continue from")
    for switch in ("amtpn", "cbam", "ca", "sa", "aff", "tce", "tpp",
                   "l-pse", "l-trip"):
        p.add_argument(f"--no-{switch}", action="store_true",
                       dest=f"no_{switch.replace('-', '_')}",
                       help=f"ablation: disable {switch}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="frame-level AUC/AP report for a checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--csv", help="also write a per-frame score CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("score", help="write per-frame anomaly scores as CSV")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("plot", help="render score curves with gt shading as SVG")
    p.add_argument("--scores", required=True, help="CSV from `score`/`eval --csv`")
    p.add_argument("--out", required=True)
    p.add_argument("--video", help="only this video id")
    p.add_argument("--max-videos", type=int, default=8)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("gradcheck", help="module-wise finite-difference suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-seeds", type=int, default=5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--entries", type=int, default=4,
                   help="finite-differenced entries per parameter")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("info", help="print config and format versions")
    p.add_argument("--config")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except json.JSONDecodeError as exc:
        print(f"error: config: invalid JSON: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: missing-path: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FeatureFileError as exc:
        print(f"error: format:{exc.code}: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (NonFiniteLossError, GradCheckAborted, UndefinedMetricError) as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
