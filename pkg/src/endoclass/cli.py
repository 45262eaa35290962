"""Command-line entry point: train / evaluate / predict / visualize / synth.

Exit codes are part of the interface:

    0  success
    2  configuration problem (bad file, unknown key, bad value)
    3  data problem (missing root, empty class, undecodable input, too few samples)
    4  training aborted on a non-finite gradient
    5  checkpoint unreadable or incompatible

Artifact layout under the output directory: ``curves.png|csv``,
``history.json``, ``best.ckpt``, ``manifest.csv``, ``config_used.cfg``
(train); ``report.json``, ``confusion.png|csv``, ``roc.png|json``
(evaluate); ``predictions.csv``, ``probabilities.json`` (predict);
``tsne.png|csv`` (visualize).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import dump_config, load_config, load_config_text
from .dataset import (IMAGE_EXTENSIONS, VAL, ClassSet, SplitSpec,
                      scan_dataset, stratified_split, write_manifest_csv)
from .errors import (ConfigError, CorruptCheckpoint, DataError,
                     IncompatibleConfig, NonFiniteGradient, TooFewSamples,
                     UnreadableImage)
from .metrics import evaluate_model, write_confusion_csv, write_report_json
from .models import build_ensemble, extract_features
from .plots import (render_confusion_heatmap, render_embedding, render_roc,
                    render_training_curves)
from .preprocess import load_raw, normalize, resize, to_unit
from .training import (load_checkpoint, restore_model, save_checkpoint,
                       write_history_csv, write_history_json)
from .tsne import TsneConfig, tsne_embed

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_CHECKPOINT = 5

CHECKPOINT_NAME = "best.ckpt"


def _ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _split_manifest(data_root, class_set, fraction: float, seed: int):
    manifest = scan_dataset(data_root, class_set)
    return stratified_split(manifest, SplitSpec(train_fraction=fraction, seed=seed))


def _split_for_checkpoint(data_root, model, fraction: float, seed: int):
    """Scan + split a dataset for an existing checkpoint's class set.

    Classes are inferred from the directories first and then compared, so
    a dataset that disagrees with the checkpoint reads as a checkpoint
    incompatibility, not a data error.
    """
    manifest = scan_dataset(data_root)
    if manifest.class_set.names != model.class_set.names:
        raise IncompatibleConfig(
            f"checkpoint classes {list(model.class_set.names)} do not match "
            f"dataset classes {list(manifest.class_set.names)}")
    return stratified_split(manifest, SplitSpec(train_fraction=fraction, seed=seed))


def _runtime_from_checkpoint(ckpt):
    """Recover the preprocessing/split settings a checkpoint was trained with."""
    echo = ckpt.config.get("run", {}).get("config_text")
    if echo:
        # env={} so a SEED set now cannot change the recorded split
        return load_config_text(echo, env={})
    seed = int(ckpt.config.get("training", {}).get("seed", 0))
    base = load_config_text("", env={})
    from .config import with_seed
    return with_seed(base, seed)


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = _ensure_dir(cfg.output_dir)
    class_set = ClassSet(cfg.classes) if cfg.classes else None
    manifest = _split_manifest(cfg.data_root, class_set, cfg.train_fraction,
                               cfg.seed)
    write_manifest_csv(manifest, out_dir / "manifest.csv")
    (out_dir / "config_used.cfg").write_text(dump_config(cfg))
    input_size = cfg.resolved_input_size()
    model = build_ensemble(cfg.variant, manifest.class_set, fusion=cfg.fusion,
                           seed=cfg.seed, input_size=input_size)
    echo = {"config_text": dump_config(cfg)}

    def log_fn(m):
        print(f"epoch {m.epoch:3d}  train_loss {m.train_loss:.4f}  "
              f"val_loss {m.val_loss:.4f}  train_acc {m.train_acc:.4f}  "
              f"val_acc {m.val_acc:.4f}")

    from .training import fit
    try:
        history, best = fit(model, manifest, cfg.training, stats=cfg.normalize,
                            policy=cfg.augment, input_size=input_size,
                            extra_config=echo, log_fn=log_fn)
    except NonFiniteGradient as exc:
        if exc.history:
            write_history_csv(exc.history, out_dir / "curves.csv")
        raise
    save_checkpoint(best, out_dir / CHECKPOINT_NAME)
    write_history_json(history, out_dir / "history.json")
    render_training_curves(history, out_dir / "curves.png", out_dir / "curves.csv")
    print(f"best val_acc {best.best_val_acc:.4f} at epoch {best.epoch}; "
          f"checkpoint {out_dir / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = restore_model(ckpt)
    run_cfg = _runtime_from_checkpoint(ckpt)
    manifest = _split_for_checkpoint(args.data, model,
                                     run_cfg.train_fraction, run_cfg.seed)
    frames = manifest.frames_for(args.split)
    if not frames:
        raise TooFewSamples(f"split {args.split!r} is empty")
    out_dir = _ensure_dir(args.out)
    input_size = model.backbone_a.cfg.input_size
    result = evaluate_model(model, frames, model.class_set,
                            stats=run_cfg.normalize, input_size=input_size,
                            batch_size=run_cfg.training.batch_size)
    write_report_json(result, out_dir / "report.json")
    render_confusion_heatmap(result.confusion, out_dir / "confusion.png",
                             out_dir / "confusion.csv")
    render_roc(result.curves, model.class_set, out_dir / "roc.png",
               out_dir / "roc.json", omitted=result.omitted)
    rep = result.report
    print(f"accuracy {rep.accuracy:.4f}")
    print(f"macro_f1 {rep.macro_f1:.4f}")
    print(f"micro_f1 {rep.micro_f1:.4f}")
    return EXIT_OK


def _collect_inputs(path: Path):
    if path.is_dir():
        return sorted(p for p in path.iterdir()
                      if p.suffix.lower() in IMAGE_EXTENSIONS and p.is_file())
    return [path]


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = restore_model(ckpt)
    run_cfg = _runtime_from_checkpoint(ckpt)
    input_size = model.backbone_a.cfg.input_size
    paths = _collect_inputs(Path(args.input))
    tensors, kept, skipped = [], [], []
    for p in paths:
        try:
            raw = load_raw(p)
        except UnreadableImage as exc:
            skipped.append((p, str(exc)))
            continue
        img = normalize(to_unit(resize(raw, (input_size, input_size))),
                        run_cfg.normalize)
        tensors.append(img.data)
        kept.append(p)
    if not kept:
        raise DataError(f"no decodable images under {args.input}")
    for p, reason in skipped:
        print(f"skipped {p}: {reason}", file=sys.stderr)
    names = model.class_set.names
    out_dir = _ensure_dir(args.out)
    batch = run_cfg.training.batch_size
    probs = np.vstack([model.predict_probs(np.stack(tensors[i:i + batch]))
                       for i in range(0, len(tensors), batch)])
    preds = probs.argmax(axis=1)
    with open(out_dir / "predictions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "predicted_class", "confidence"])
        for p, row, cls in zip(kept, probs, preds):
            writer.writerow([p, names[cls], repr(float(row[cls]))])
    payload = {str(p): {name: float(v) for name, v in zip(names, row)}
               for p, row in zip(kept, probs)}
    with open(out_dir / "probabilities.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(kept)} predictions to {out_dir / 'predictions.csv'}")
    return EXIT_OK


def cmd_visualize(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = restore_model(ckpt)
    run_cfg = _runtime_from_checkpoint(ckpt)
    manifest = _split_for_checkpoint(args.data, model,
                                     run_cfg.train_fraction, run_cfg.seed)
    frames = manifest.frames_for(args.split)
    if len(frames) < 8:
        raise TooFewSamples(
            f"split {args.split!r} has {len(frames)} frames; need >= 8")
    input_size = model.backbone_a.cfg.input_size
    features, labels = extract_features(model, frames, run_cfg.normalize,
                                        input_size,
                                        batch_size=run_cfg.training.batch_size)
    tsne_cfg = run_cfg.tsne
    if "SEED" in os.environ:
        tsne_cfg = replace(tsne_cfg, seed=int(os.environ["SEED"]))
    emb = tsne_embed(features, labels, tsne_cfg)
    out_dir = _ensure_dir(args.out)
    render_embedding(emb, model.class_set, out_dir / "tsne.png",
                     out_dir / "tsne.csv")
    print(f"embedded {len(frames)} frames; final KL {emb.final_kl:.4f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import generate_dataset
    counts = generate_dataset(args.out, per_class=args.per_class, seed=args.seed)
    total = sum(counts.values())
    print(f"wrote {total} frames across {len(counts)} classes under {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="endoclass",
        description="Train and evaluate an ensemble classifier for "
                    "endoscopic image frames.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="scan, split, and train per a config file")
    p_train.add_argument("--config", default=None,
                         help="key = value config file (defaults if omitted)")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--split", default=VAL, choices=["train", "val"])
    p_eval.add_argument("--out", default="out")
    p_eval.set_defaults(func=cmd_evaluate)

    p_pred = sub.add_parser("predict", help="classify new frames with a checkpoint")
    p_pred.add_argument("--ckpt", required=True)
    p_pred.add_argument("--input", required=True,
                        help="an image file or a directory of images")
    p_pred.add_argument("--out", default="out")
    p_pred.set_defaults(func=cmd_predict)

    p_vis = sub.add_parser("visualize", help="t-SNE embedding of ensemble features")
    p_vis.add_argument("--ckpt", required=True)
    p_vis.add_argument("--data", required=True)
    p_vis.add_argument("--split", default=VAL, choices=["train", "val"])
    p_vis.add_argument("--out", default="out")
    p_vis.set_defaults(func=cmd_visualize)

    p_synth = sub.add_parser("synth", help="generate the synthetic stand-in dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--per-class", dest="per_class", type=int, default=20)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorruptCheckpoint, IncompatibleConfig) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NonFiniteGradient as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
