"""Command-line entry point.

Commands: synth-data, train, eval, predict, export-attention, grad-check.
Configuration comes from a `key = value` file plus command-line overrides
(flag wins over file wins over default).  Every failure maps to a stable
exit code from the table below.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, build_run_config, parse_override
from .data import (ManifestError, VolumeFormatError, Volume, center_crop_or_pad,
                   read_manifest, read_volume, subject_level_split, write_volume,
                   zscore_normalize, SplitSpec, load_samples)
from .gradcheck import full_suite
from .metrics import CLASS_NAMES
from .model import AttentionUnavailableError, build_model, export_attention_maps
from .phantom import generate_phantom_dataset
from .reporting import (export_volume_slices, save_attention_panel, save_eval_figure,
                        save_loss_curves)
from .tensor import Tensor
from .training import (CheckpointFingerprintError, CheckpointFormatError,
                       CheckpointShapeError, TrainingDivergedError,
                       evaluate_model, load_checkpoint, save_checkpoint, train,
                       write_epoch_log)

EXIT_OK = 0
EXIT_USAGE = 2              # bad flags, bad config keys or values
EXIT_IO = 3                 # missing or unreadable/unwritable paths
EXIT_DATA_FORMAT = 4        # malformed volume or manifest
EXIT_CKPT_CORRUPT = 5       # checkpoint container unreadable
EXIT_CKPT_SHAPE = 6         # checkpoint index/payload mismatch
EXIT_CKPT_FINGERPRINT = 7   # checkpoint belongs to another configuration
EXIT_NO_ATTENTION = 8       # attention export from a gate-free model
EXIT_GRADCHECK_FAILED = 9   # at least one gradient check exceeded tolerance
EXIT_DIVERGED = 10          # non-finite loss during training


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any configuration key (repeatable)")
    p.add_argument("--no-attention", action="store_true",
                   help="ablation: plain skip connections, no gates")
    p.add_argument("--no-pet-head", action="store_true",
                   help="ablation: classification only, no PET synthesis")


def _run_config(args):
    overrides: dict[str, object] = {}
    for spec in args.set:
        key, value = parse_override(spec)
        overrides[key] = value
    if getattr(args, "no_attention", False):
        overrides["use_attention"] = False
    if getattr(args, "no_pet_head", False):
        overrides["use_pet_head"] = False
    return build_run_config(args.config, overrides)


def cmd_synth_data(args) -> int:
    rc = _run_config(args)
    dataset = generate_phantom_dataset(rc.phantom_config(), args.out)
    paired = sum(1 for r in dataset.records if r.pet_path)
    print(f"wrote {len(dataset.records)} studies ({paired} paired) to {args.out}")
    print(f"manifest: {dataset.manifest_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = _run_config(args)
    data_dir = Path(args.data)
    records = read_manifest(data_dir / "manifest.csv")
    subjects = sorted({r.subject_id for r in records})
    splits = subject_level_split(subjects, tuple(rc.split_ratios), rc.split_seed)
    model_cfg = rc.model_config()
    train_samples = load_samples(records, data_dir, splits.train, model_cfg.input_shape)
    val_samples = load_samples(records, data_dir, splits.val, model_cfg.input_shape)
    model = build_model(model_cfg, seed=rc.model_seed)
    result = train(model, train_samples, val_samples, rc.train_config())

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.best, out / "checkpoint.upet")
    write_epoch_log(result.log, out / "epoch_log.csv")
    (out / "splits.json").write_text(json.dumps(splits.to_dict(), indent=1))
    save_loss_curves(result.log, out / "loss_curves.png")
    best = result.best
    print(f"best epoch {best.epoch}: val accuracy {best.metrics.accuracy:.4f}, "
          f"val macro F1 {best.metrics.f1_macro:.4f}")
    print(f"checkpoint: {out / 'checkpoint.upet'}")
    return EXIT_OK


def _load_split_samples(args, model_cfg, split_name: str):
    data_dir = Path(args.data)
    records = read_manifest(data_dir / "manifest.csv")
    splits_path = Path(args.splits) if args.splits else Path(args.checkpoint).parent / "splits.json"
    if not splits_path.exists():
        raise FileNotFoundError(f"splits file not found: {splits_path}")
    splits = SplitSpec.from_dict(json.loads(splits_path.read_text()))
    wanted = getattr(splits, split_name)
    return load_samples(records, data_dir, wanted, model_cfg.input_shape)


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.rebuild_model()
    samples = _load_split_samples(args, model.config, args.split)
    report = evaluate_model(model, samples)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / f"metrics_{args.split}.txt", out / f"metrics_{args.split}.csv")
    save_eval_figure(report, out / f"metrics_{args.split}.png")
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _prepare_mri(model, mri_path):
    vol = read_volume(mri_path)
    vol, _ = zscore_normalize(vol)
    vol = center_crop_or_pad(vol, model.config.input_shape)
    return vol, Tensor(vol.elements[None, None], dtype=model.dtype)


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.rebuild_model()
    vol, batch = _prepare_mri(model, args.mri)
    outputs = model.forward(batch)
    probs = model.class_probabilities(outputs)[0]
    label = CLASS_NAMES[int(np.argmax(probs))]
    print(f"prediction: {label}")
    for name, p in zip(CLASS_NAMES, probs):
        print(f"  p({name}) = {p:.6f}")
    if outputs.pet_pred is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        pet = Volume(dims=outputs.input_spatial, voxel_size_mm=vol.voxel_size_mm,
                     modality="PET", elements=outputs.pet_pred.data[0, 0],
                     name="synthetic-pet")
        write_volume(pet, out / "synthetic_pet.vol")
        print(f"synthetic PET: {out / 'synthetic_pet.vol'}")
    return EXIT_OK


def cmd_export_attention(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.rebuild_model()
    vol, batch = _prepare_mri(model, args.mri)
    outputs = model.forward(batch)
    selector = [g.strip() for g in args.gates.split(",")] if args.gates else None
    volumes = export_attention_maps(outputs, selector)   # raises if gate-free
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    attention_arrays: dict[str, np.ndarray] = {}
    for v in volumes:
        stem = f"attention_{v.name}"
        write_volume(v, out / f"{stem}.vol")
        export_volume_slices(v.elements, out, stem, lo=0.0, hi=1.0)
        attention_arrays[v.name] = v.elements
    pet = outputs.pet_pred.data[0, 0] if outputs.pet_pred is not None else None
    save_attention_panel(vol.elements, pet, attention_arrays, out / "attention_panel.png")
    print(f"exported {len(volumes)} attention maps to {out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.precision != "f64":
        print("grad-check runs in 64-bit only: central differences are "
              "unreliable in 32-bit", file=sys.stderr)
        return EXIT_USAGE
    failures = 0
    print(f"{'check':50s} {'max rel err':>12s} {'tolerance':>10s}  result")
    for entry in full_suite():
        err = entry.run()
        ok = err < entry.threshold
        failures += 0 if ok else 1
        print(f"{entry.name:50s} {err:12.3e} {entry.threshold:10.0e}  "
              f"{'pass' if ok else 'FAIL'}")
    if failures:
        print(f"{failures} check(s) failed", file=sys.stderr)
        return EXIT_GRADCHECK_FAILED
    print("all gradient checks passed")
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="upet",
        description="dementia classification with joint synthetic PET generation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a phantom dataset")
    _add_config_args(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train on a manifest directory")
    _add_config_args(p)
    p.add_argument("--data", type=Path, required=True, help="directory with manifest.csv")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="val")
    p.add_argument("--splits", type=Path, default=None,
                   help="splits.json (default: next to the checkpoint)")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one MRI and synthesize its PET")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mri", type=Path, required=True)
    p.add_argument("--out", type=Path, default=Path("."))
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("export-attention", help="write attention maps and slice panels")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mri", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--gates", default=None, help="comma-separated gate names (default all)")
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("grad-check", help="finite-difference verification of all operators")
    p.add_argument("--precision", choices=("f64", "f32"), default="f64")
    p.set_defaults(func=cmd_grad_check)

    return parser


_ERROR_CODES: list[tuple[type, int]] = [
    (ConfigError, EXIT_USAGE),
    (VolumeFormatError, EXIT_DATA_FORMAT),
    (ManifestError, EXIT_DATA_FORMAT),
    (CheckpointFormatError, EXIT_CKPT_CORRUPT),
    (CheckpointShapeError, EXIT_CKPT_SHAPE),
    (CheckpointFingerprintError, EXIT_CKPT_FINGERPRINT),
    (AttentionUnavailableError, EXIT_NO_ATTENTION),
    (TrainingDivergedError, EXIT_DIVERGED),
    (FileNotFoundError, EXIT_IO),
    (PermissionError, EXIT_IO),
    (OSError, EXIT_IO),
    (ValueError, EXIT_USAGE),
]


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except tuple(t for t, _ in _ERROR_CODES) as exc:
        for etype, code in _ERROR_CODES:
            if isinstance(exc, etype):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
