"""Command-line entry points: synth, extract, train, evaluate, report.

Spectrogram caches live under OUT/features/<family>_<FxT>_<level>/; train
and evaluate reuse them when present and compute any that are missing, so
the commands also work standalone.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import data, dsp, evaluation
from .augment import LabeledSpectrogram
from .config import load_run_config, parse_size
from .errors import LungsoundError
from .evaluation import TASKS
from .model import ModelConfig, RespiratoryClassifier
from .training import (evaluate_model, fit, load_checkpoint, save_checkpoint,
                       write_history_csv)


def _feature_dir(out, family, size, level):
    return os.path.join(out, "features", f"{family}_{size[0]}x{size[1]}_{level}")


def _iter_samples(manifest, level):
    """Yield (sample_id, clip_loader, raw_label, split) per event/recording."""
    for entry in manifest.entries:
        ann = manifest.load_annotation(entry)
        if level == "record":
            yield ann.recording_id, (entry, None), ann.record_label, entry.split
        else:
            for k, (onset, offset, label) in enumerate(ann.events):
                sample_id = f"{ann.recording_id}_e{k}"
                yield sample_id, (entry, k), label, entry.split


def _load_clip(manifest, handle):
    entry, event_idx = handle
    clip = manifest.load_audio(entry)
    if event_idx is None:
        return clip
    ann = manifest.load_annotation(entry)
    return data.segment_events(clip, ann)[event_idx][0]


def extract_features(manifest, wavelet, size, level, feature_dir):
    """Compute (or reuse) one cache file per sample; returns the index."""
    os.makedirs(feature_dir, exist_ok=True)
    target_s = dsp.EVENT_SECONDS if level == "event" else dsp.RECORD_SECONDS
    index = {"wavelet": wavelet.family, "size": list(size), "level": level,
             "samples": []}
    for sample_id, handle, raw_label, split in _iter_samples(manifest, level):
        cache = os.path.join(feature_dir, f"{sample_id}.lssg")
        if not os.path.exists(cache):
            clip = _load_clip(manifest, handle)
            spec = dsp.extract_spectrogram(clip, wavelet, size[0], size[1],
                                           target_s)
            dsp.save_spectrogram(cache, spec)
        index["samples"].append(
            {"id": sample_id, "cache": os.path.basename(cache),
             "label": raw_label, "split": split}
        )
    index["samples"].sort(key=lambda s: s["id"])
    with open(os.path.join(feature_dir, "index.json"), "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    return index


def _dataset_for_task(index, feature_dir, task):
    """LabeledSpectrogram list plus train/validation index lists."""
    items, train_idx, val_idx = [], [], []
    n_cls = len(task.class_names)
    for sample in index["samples"]:
        cls = task.map_label(sample["label"])
        label = np.zeros(n_cls)
        label[cls] = 1.0
        spec = dsp.load_spectrogram(os.path.join(feature_dir, sample["cache"]))
        (train_idx if sample["split"] == "train" else val_idx).append(len(items))
        items.append((sample["id"], LabeledSpectrogram(spec=spec, label=label)))
    ids = [sid for sid, _ in items]
    return ids, [it for _, it in items], train_idx, val_idx


def _prepare(args, level):
    cfg = load_run_config(
        path=args.config,
        overrides={
            "seed": getattr(args, "seed", None),
            "wavelet.family": getattr(args, "wavelet", None),
            "spectrogram.size": getattr(args, "size", None),
        },
    )
    manifest = data.DatasetManifest.load(args.manifest)
    fdir = _feature_dir(args.out, cfg.wavelet.family, cfg.size, level)
    index_path = os.path.join(fdir, "index.json")
    if os.path.exists(index_path):
        with open(index_path) as fh:
            index = json.load(fh)
    else:
        index = extract_features(manifest, cfg.wavelet, cfg.size, level, fdir)
    return cfg, manifest, fdir, index


def cmd_synth(args):
    data.generate_synthetic_dataset(
        args.out, args.seed, args.n_per_class,
        include_poor_quality=not args.no_poor_quality,
        validation_every=args.validation_every,
    )
    print(f"synthetic dataset written to {args.out}")
    return 0


def cmd_extract(args):
    cfg = load_run_config(
        path=args.config,
        text="" if args.config is None else None,
        overrides={
            "wavelet.family": args.wavelet,
            "spectrogram.size": args.size,
        },
    )
    manifest = data.DatasetManifest.load(args.manifest)
    for level in args.levels.split(","):
        if level not in ("event", "record"):
            raise LungsoundError(f"unknown extraction level {level!r}")
        fdir = _feature_dir(args.out, cfg.wavelet.family, cfg.size, level)
        index = extract_features(manifest, cfg.wavelet, cfg.size, level, fdir)
        print(f"{len(index['samples'])} {level} spectrograms in {fdir}")
    return 0


def cmd_train(args):
    task = TASKS[args.task]
    cfg, _, fdir, index = _prepare(args, task.level)
    _, items, train_idx, val_idx = _dataset_for_task(index, fdir, task)
    crop = cfg.augment.crop_bins
    model_config = ModelConfig(
        input_dims=(cfg.size[0] - crop, cfg.size[1] - crop),
        n_classes=len(task.class_names),
        doub_inc_channels=cfg.doub_inc_channels,
        inc_res_channels=cfg.inc_res_channels,
        rn_lambda=cfg.rn_lambda,
        attn_heads=cfg.attn_heads,
        attn_key_dim=cfg.attn_key_dim,
        fc_hidden=cfg.fc_hidden,
        dropout=cfg.dropout,
    )
    model = RespiratoryClassifier(model_config, seed=cfg.seed)
    os.makedirs(os.path.join(args.out, "checkpoints"), exist_ok=True)
    ckpt = args.checkpoint or os.path.join(
        args.out, "checkpoints", f"task_{args.task}.lsck"
    )
    result = fit(model, items, train_idx, val_idx, task, cfg.train,
                 cfg.augment, checkpoint_path=ckpt)
    write_history_csv(
        os.path.join(args.out, f"history_task_{args.task}.csv"), result.history
    )
    print(
        f"task {args.task}: best validation Score {result.best_score:.4f} "
        f"at epoch {result.best_epoch} -> {ckpt}"
    )
    return 0


def cmd_evaluate(args):
    task = TASKS[args.task]
    cfg, _, fdir, index = _prepare(args, task.level)
    ids, items, train_idx, val_idx = _dataset_for_task(index, fdir, task)
    model, _, _, _ = load_checkpoint(args.checkpoint)
    eval_idx = val_idx if val_idx else train_idx
    report = evaluate_model(model, items, eval_idx, task, cfg.augment.crop_bins)

    os.makedirs(os.path.join(args.out, "reports"), exist_ok=True)
    report_path = os.path.join(args.out, "reports", f"task_{args.task}.json")
    with open(report_path, "w") as fh:
        fh.write(report.to_json() + "\n")
    _write_predictions(
        os.path.join(args.out, "reports", f"task_{args.task}_predictions.csv"),
        model, items, ids, eval_idx, task, cfg.augment.crop_bins,
    )
    print(f"task {args.task}: Score {report.score:.4f} -> {report_path}")
    return 0


def _write_predictions(path, model, items, ids, indices, task, crop_bins):
    from . import autodiff as ad
    from .augment import center_crop

    with ad.no_grad(), open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["id", "truth", "prediction"]
            + [f"p_{c}" for c in task.class_names]
        )
        for i in indices:
            item = items[i]
            batch = center_crop(item.spec, crop_bins).values[None, None, :, :]
            probs = model.forward(batch.astype(np.float64)).data[0]
            writer.writerow(
                [ids[i], task.class_names[int(np.argmax(item.label))],
                 task.class_names[int(np.argmax(probs))]]
                + [f"{p:.6f}" for p in probs]
            )


def _write_pgm(path, values):
    lo, hi = float(values.min()), float(values.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    gray = np.round((values - lo) * scale).astype(np.uint8)
    header = f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode()
    with open(path, "wb") as fh:
        fh.write(header + gray.tobytes())


def cmd_report(args):
    out_dir = os.path.join(args.out, "reports")
    img_dir = os.path.join(out_dir, "img")
    os.makedirs(img_dir, exist_ok=True)
    feature_root = os.path.join(args.out, "features")
    n_images = 0
    if os.path.isdir(feature_root):
        for sub in sorted(os.listdir(feature_root)):
            subdir = os.path.join(feature_root, sub)
            for name in sorted(os.listdir(subdir)):
                if name.endswith(".lssg"):
                    spec = dsp.load_spectrogram(os.path.join(subdir, name))
                    _write_pgm(
                        os.path.join(img_dir, f"{sub}__{name[:-5]}.pgm"),
                        spec.values,
                    )
                    n_images += 1
    lines = [f"rendered {n_images} spectrogram images to {img_dir}", ""]
    for name in sorted(os.listdir(out_dir)) if os.path.isdir(out_dir) else []:
        if name.startswith("task_") and name.endswith(".json"):
            with open(os.path.join(out_dir, name)) as fh:
                rep = json.load(fh)
            lines.append(
                f"task {rep['task']}: SE={rep['SE']:.3f} SP={rep['SP']:.3f} "
                f"AS={rep['AS']:.3f} HS={rep['HS']:.3f} Score={rep['Score']:.3f}"
            )
    summary = os.path.join(out_dir, "summary.txt")
    with open(summary, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lungsound",
        description="Respiratory-anomaly detection pipeline "
                    "(CWT features + inception-residual attention classifier)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-per-class", type=int, default=5)
    p.add_argument("--validation-every", type=int, default=4)
    p.add_argument("--no-poor-quality", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", help="write spectrogram caches")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--wavelet", choices=("amor", "bump", "morse"))
    p.add_argument("--size", help="FxT, e.g. 128x512")
    p.add_argument("--levels", default="event",
                   help="comma list of event,record")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train a model for one task")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--task", required=True, choices=sorted(TASKS))
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on one task")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--task", required=True, choices=sorted(TASKS))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render spectrogram images and a "
                                      "plain-text score summary")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (LungsoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
