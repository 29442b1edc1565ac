"""Command-line entry points: gen-data, train, eval, ablate, visualize.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure. Compute precision (32/64-bit) follows the DEFORMAD_PRECISION
environment variable. All tables are headered CSV; figures are PNG.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .data import (
    contaminate,
    corpus_from_idx,
    generate_corpus,
    load_dataset,
    ood_split,
    render_glyph,
    place_on_canvas,
    save_dataset,
    LabeledImage,
)
from .evaluate import evaluate_dataset, write_score_table
from .fileio import DataError, atomic_write_text
from .model import Model
from .train import NumericError, train_model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(args) -> ExperimentConfig:
    if args.config:
        config = ExperimentConfig.load(args.config)
    else:
        config = ExperimentConfig.default(getattr(args, "mode", None) or "pdm")
    if getattr(args, "mode", None):
        config.mode = args.mode
        if args.config is None and args.mode == "ppdm":
            config.loss.gamma2 = 1.0
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        config.override(key, value)
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        config.optimizer.epochs = args.epochs
    if getattr(args, "data_root", None):
        config.data.root = args.data_root
    return config.validate()


def _write_config_snapshot(config, run_dir):
    os.makedirs(run_dir, exist_ok=True)
    atomic_write_text(os.path.join(run_dir, "config.json"), config.to_json())


# -- subcommands ----------------------------------------------------------------

def cmd_gen_data(args):
    config = _load_config(args)
    root = config.data.root
    if args.source == "synthetic":
        corpus = generate_corpus(config.data, config.image, config.seed)
    else:
        if not (args.mnist_images and args.mnist_labels):
            raise UsageError("--source idx requires --mnist-images and "
                             "--mnist-labels")
        corpus = corpus_from_idx(args.mnist_images, args.mnist_labels,
                                 config.data, config.image, config.seed)
    train, test_seen, test_unseen = ood_split(
        corpus, config.data.seen_classes,
        holdout_fraction=config.data.holdout_fraction, seed=config.seed)
    if config.data.contamination > 0.0:
        pool = _contaminant_pool(config, math.ceil(
            config.data.contamination * len(train)))
        train = contaminate(train, pool, config.data.contamination,
                            seed=config.seed)
    save_dataset(os.path.join(root, "train"), train)
    save_dataset(os.path.join(root, "test"), test_seen + test_unseen)
    _write_config_snapshot(config, root)
    print(f"wrote {len(train)} training and "
          f"{len(test_seen) + len(test_unseen)} test samples under {root}")
    return EXIT_OK


def _contaminant_pool(config, count):
    """Unseen-class glyphs rendered outside the test index range."""
    unseen = sorted(set(range(10)) - set(config.data.seen_classes))
    if not unseen:
        raise DataError("contamination requested but every class is seen")
    pool = []
    idx = 0
    while len(pool) < count:
        label = unseen[idx % len(unseen)]
        glyph = render_glyph(label, config.seed, 900000 + idx,
                             size=config.data.glyph_size)
        rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, label, 900000 + idx, 1]))
        pixels = place_on_canvas(glyph, config.image.height,
                                 config.image.width,
                                 config.data.placement_jitter, rng)
        pool.append(LabeledImage(sample_id=f"pool{idx:05d}", pixels=pixels,
                                 label=label, anomaly=True))
        idx += 1
    return pool


def _architecture_signature(config):
    payload = json.loads(config.to_json())
    return {k: payload[k] for k in ("mode", "image", "memory", "skip",
                                    "deform", "encoder", "ablation")}


def cmd_train(args):
    config = _load_config(args)
    run_dir = args.out
    _write_config_snapshot(config, run_dir)
    train_images = load_dataset(os.path.join(config.data.root, "train"))
    if not train_images:
        raise DataError(f"no training data under {config.data.root!r}; "
                        f"run gen-data first")
    if args.init_from:
        model, _ = load_checkpoint(args.init_from)
        if _architecture_signature(model.config) != _architecture_signature(config):
            raise DataError(f"checkpoint {args.init_from} architecture does "
                            f"not match the requested config")
        model.config = config
    else:
        model = Model(config)

    ckpt_dir = os.path.join(run_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    best = {"total": float("inf")}

    def on_epoch(record):
        if record.total < best["total"]:
            best["total"] = record.total
            save_checkpoint(os.path.join(ckpt_dir, "best.ckpt"), model,
                            extra={"epoch": record.epoch,
                                   "total": record.total})
        if args.verbose:
            print(f"epoch {record.epoch:3d} lr {record.lr:.3e} "
                  f"total {record.total:.5f} rec {record.rec:.5f}")
        return True

    model, history = train_model(config, train_images, model=model,
                                 on_epoch=on_epoch)
    save_checkpoint(os.path.join(ckpt_dir, "final.ckpt"), model,
                    extra={"epoch": config.optimizer.epochs - 1})
    _write_history(os.path.join(run_dir, "losses.csv"), history)
    from .report import save_loss_curves
    save_loss_curves(history, os.path.join(run_dir, "loss_curves.png"))
    print(f"trained {config.optimizer.epochs} epochs; final total loss "
          f"{history[-1].total:.5f}; run directory {run_dir}")
    return EXIT_OK


def _write_history(path, history):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(tuple(h for h in history[0].ROW_FIELDS))
    for rec in history:
        writer.writerow(rec.row())
    atomic_write_text(path, buf.getvalue())


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    config_for_eval = model.config
    if args.config:
        requested = ExperimentConfig.load(args.config)
        if (model.config.image.height, model.config.image.width) != (
                requested.image.height, requested.image.width):
            raise DataError("checkpoint geometry does not match the config")
        config_for_eval = requested
        config_for_eval.mode = model.config.mode
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        config_for_eval.override(key, value)
    if args.alpha is not None:
        config_for_eval.loss.alpha = args.alpha
    if args.data_root:
        config_for_eval.data.root = args.data_root
    config_for_eval.validate()
    test_images = load_dataset(os.path.join(config_for_eval.data.root, "test"))
    if not test_images:
        raise DataError("no test data found; run gen-data first")
    result = evaluate_dataset(model, test_images, config_for_eval,
                              alpha=args.alpha)
    run_dir = args.out
    os.makedirs(run_dir, exist_ok=True)
    write_score_table(os.path.join(run_dir, "scores.csv"), result.records)
    summary = {"auc_image": result.auc_image, "auc_pixel": result.auc_pixel,
               "samples": len(result.records),
               "alpha": (args.alpha if args.alpha is not None
                         else config_for_eval.loss.alpha)}
    atomic_write_text(os.path.join(run_dir, "eval.json"),
                      json.dumps(summary, indent=2, sort_keys=True) + "\n")
    from .report import save_roc_curve, save_score_histogram
    save_score_histogram(result.records, os.path.join(run_dir,
                                                      "score_hist.png"))
    save_roc_curve(result.records, os.path.join(run_dir, "roc.png"))
    pixel_note = ("" if result.auc_pixel is None
                  else f", pixel AUC {result.auc_pixel:.4f}")
    print(f"image AUC {result.auc_image:.4f}{pixel_note} over "
          f"{len(result.records)} samples; tables in {run_dir}")
    return EXIT_OK


ABLATION_ARMS = ("full", "no_deform", "single_head", "no_memory",
                 "no_background", "no_strength", "no_smoothness")


def _arm_config(base, arm):
    cfg = ExperimentConfig.from_json(base.to_json())  # deep copy via round trip
    if arm != "full":
        setattr(cfg.ablation, arm, True)
    return cfg.validate()


def cmd_ablate(args):
    base = _load_config(args)
    arms = args.arms.split(",") if args.arms else list(ABLATION_ARMS)
    for arm in arms:
        if arm not in ABLATION_ARMS:
            raise UsageError(f"unknown ablation arm {arm!r}; choose from "
                             f"{ABLATION_ARMS}")
    run_dir = args.out
    _write_config_snapshot(base, run_dir)
    train_images = load_dataset(os.path.join(base.data.root, "train"))
    test_images = load_dataset(os.path.join(base.data.root, "test"))
    if not train_images or not test_images:
        raise DataError("gen-data must run before ablate")

    rows = []
    full_auc = None
    for arm in arms:
        try:
            cfg = _arm_config(base, arm)
            model, _ = train_model(cfg, train_images)
            result = evaluate_dataset(model, test_images, cfg)
            auc = result.auc_image
            rows.append((arm, auc, None))
            if arm == "full":
                full_auc = auc
            print(f"arm {arm:14s} image AUC {auc:.4f}")
        except Exception as exc:  # arm failures recorded, remaining continue
            rows.append((arm, None, f"{type(exc).__name__}: {exc}"))
            print(f"arm {arm:14s} FAILED: {exc}", file=sys.stderr)

    gamma_rows = []
    if args.gamma3_sweep:
        if base.mode != "ppdm":
            raise UsageError("--gamma3-sweep requires mode=ppdm")
        for gamma3 in (0.0, 0.1, 0.25, 0.5, 1.0, 2.0):
            cfg = ExperimentConfig.from_json(base.to_json())
            cfg.loss.gamma3 = gamma3
            try:
                model, _ = train_model(cfg, train_images)
                result = evaluate_dataset(model, test_images, cfg)
                gamma_rows.append((gamma3, result.auc_image, None))
                print(f"gamma3 {gamma3:4g} image AUC {result.auc_image:.4f}")
            except Exception as exc:
                gamma_rows.append((gamma3, None, str(exc)))

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["arm", "auc_image", "delta_vs_full", "error"])
    for arm, auc, err in rows:
        delta = ("" if auc is None or full_auc is None
                 else f"{auc - full_auc:.17g}")
        writer.writerow([arm, "" if auc is None else f"{auc:.17g}",
                         delta, err or ""])
    for gamma3, auc, err in gamma_rows:
        writer.writerow([f"gamma3={gamma3:g}",
                         "" if auc is None else f"{auc:.17g}", "", err or ""])
    atomic_write_text(os.path.join(run_dir, "ablation.csv"), buf.getvalue())
    from .report import save_ablation_bars
    save_ablation_bars([(arm, auc) for arm, auc, _ in rows]
                       + [(f"g3={g:g}", a) for g, a, _ in gamma_rows],
                       os.path.join(run_dir, "ablation.png"))
    print(f"ablation table in {run_dir}/ablation.csv")
    return EXIT_OK


def cmd_visualize(args):
    model, _ = load_checkpoint(args.checkpoint)
    data_root = args.data_root or model.config.data.root
    images = load_dataset(os.path.join(data_root, "test"))
    if not images:
        raise DataError("no test data found to visualize")
    wanted = args.samples
    if args.ids:
        ids = set(args.ids.split(","))
        subset = [im for im in images if im.sample_id in ids]
        missing = ids - {im.sample_id for im in subset}
        if missing:
            raise DataError(f"sample id(s) not found: {sorted(missing)}")
    else:
        subset = images[:wanted]
    from .report import export_fields, export_sample_panels, save_overview_grid
    run_dir = args.out
    for im in subset:
        panel_dir = os.path.join(run_dir, "panels", im.sample_id)
        export_sample_panels(model, im, model.config, panel_dir)
        export_fields(model, im, os.path.join(run_dir, "fields"),
                      im.sample_id)
    save_overview_grid(model, subset, model.config,
                       os.path.join(run_dir, "overview.png"))
    print(f"wrote panels for {len(subset)} samples under {run_dir}")
    return EXIT_OK


# -- argument plumbing ------------------------------------------------------------

def _add_common(p, default_out):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (dotted path)")
    p.add_argument("--seed", type=int)
    p.add_argument("--data-root", help="dataset directory override")
    p.add_argument("--out", default=default_out, help="run directory")


def build_parser():
    parser = _Parser(prog="deformad",
                     description="Quantized-memory reconstruction with "
                                 "measured deformation for anomaly detection")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the dataset directories")
    _add_common(p, "runs/data")
    p.add_argument("--mode", choices=["pdm", "ppdm"])
    p.add_argument("--source", choices=["synthetic", "idx"],
                   default="synthetic")
    p.add_argument("--mnist-images")
    p.add_argument("--mnist-labels")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    _add_common(p, "runs/train")
    p.add_argument("--mode", choices=["pdm", "ppdm"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--init-from", help="warm-start checkpoint")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a test set with a checkpoint")
    _add_common(p, "runs/eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--alpha", type=float,
                   help="override the deformation-score weight")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate ablation arms")
    _add_common(p, "runs/ablate")
    p.add_argument("--mode", choices=["pdm", "ppdm"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--arms", help="comma-separated arm names")
    p.add_argument("--gamma3-sweep", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("visualize", help="export per-sample figure panels")
    _add_common(p, "runs/visualize")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--ids", help="comma-separated sample ids")
    p.set_defaults(func=cmd_visualize)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
