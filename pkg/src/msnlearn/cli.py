"""Command-line orchestration: one subcommand per pipeline stage.

Every command writes its artifacts under a run directory and echoes the
fully resolved configuration there, so a run can be reproduced from its own
config file.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from pathlib import Path

import torch

from .config import RunConfig, parse_config
from .dataio import (
    DatasetManifest,
    META_NAME,
    generate_synthetic,
    load_manifest,
)
from .downstream.features import extract_features
from .downstream.lowshot import lowshot_curve, write_lowshot_csv
from .downstream.metrics import write_metrics
from .downstream.probe import finetune, linear_probe
from .downstream.temporal import temporal_train
from .exceptions import ConfigError, MSNLearnError
from .trainer import METRICS_LOG_NAME, pretrain

OUTPUT_ROOT_ENV = "MSNLEARN_OUTPUT_ROOT"

ABLATION_AXES: dict[str, list] = {
    "prototypes": [10, 100, 1000, 10000],
    "mask": [0, 50, 70, 90],
    "focal": [0, 2, 4, 8],
    "augment": ["jit+flip+blur", "jit+flip", "jit+blur", "flip+blur"],
    "collapse": ["sk+memax", "sk", "none"],
    "epochs": [10, 100, 200, 500],
}


def enable_strict_determinism() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


def resolve_run_dir(args, config: RunConfig) -> Path:
    if args.run is not None:
        return Path(args.run)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, str(config.output_dir)))
    return root / f"{args.command}-seed{config.seed}"


def load_run_config(args) -> RunConfig:
    config = parse_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    return config


def ensure_dataset(config: RunConfig, run_dir: Path) -> DatasetManifest:
    """Load the configured manifest, or (re)generate the synthetic dataset."""
    if config.manifest_path is not None:
        return load_manifest(config.manifest_path)
    if config.synth is None:
        raise ConfigError("dataio section must provide a synth spec or a manifest")
    dataset_dir = run_dir / "dataset"
    meta_path = dataset_dir / META_NAME
    if meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta.get("synth_spec") == dataclasses.asdict(config.synth):
            return load_manifest(dataset_dir)
    return generate_synthetic(config.synth, dataset_dir)


def _prepare(args) -> tuple[RunConfig, Path]:
    """Parse + validate everything, then create the run dir and echo config."""
    config = load_run_config(args)
    if config.manifest_path is not None and not config.manifest_path.exists():
        raise ConfigError(f"manifest path does not exist: {config.manifest_path}")
    run_dir = resolve_run_dir(args, config)
    run_dir.mkdir(parents=True, exist_ok=True)
    config.write_echo(run_dir / "config.json")
    return config, run_dir


def cmd_synth(args) -> int:
    config, run_dir = _prepare(args)
    if config.synth is None:
        raise ConfigError("synth command requires a dataio.synth section")
    manifest = generate_synthetic(config.synth, run_dir / "dataset")
    print(f"dataset: {run_dir / 'dataset'} ({len(manifest.entries)} frames, "
          f"{len(manifest.video_ids())} videos)")
    return 0


def cmd_pretrain(args) -> int:
    config, run_dir = _prepare(args)
    manifest = ensure_dataset(config, run_dir)
    path = pretrain(
        manifest, config.encoder, config.trainer, run_dir,
        view_config=config.views,
        n_prototypes=config.n_prototypes,
        tau_anchor=config.tau_anchor,
        tau_target=config.tau_target,
    )
    print(f"checkpoint: {path}")
    print(f"metrics log: {run_dir / METRICS_LOG_NAME}")
    return 0


def _features_for(args, config: RunConfig, run_dir: Path):
    manifest = ensure_dataset(config, run_dir)
    features = extract_features(
        args.checkpoint, manifest, cache_dir=run_dir / "features"
    )
    return manifest, features


def cmd_extract(args) -> int:
    config, run_dir = _prepare(args)
    manifest, features = _features_for(args, config, run_dir)
    total = sum(f.embeddings.shape[0] for f in features)
    print(f"features: {run_dir / 'features'} ({len(features)} videos, {total} frames)")
    return 0


def cmd_probe(args) -> int:
    config, run_dir = _prepare(args)
    manifest, features = _features_for(args, config, run_dir)
    result = linear_probe(
        features, config.probe, config.seed, n_classes=manifest.n_classes
    )
    out = run_dir / "probe-metrics.jsonl"
    write_metrics(out, result.report, "linear_probe", "test")
    if result.val_report is not None:
        write_metrics(out, result.val_report, "linear_probe", "val")
    print(f"linear probe test macro_f1={result.report.macro_f1:.5f} "
          f"video_f1={result.report.video_f1:.5f}")
    return 0


def cmd_finetune(args) -> int:
    config, run_dir = _prepare(args)
    manifest = ensure_dataset(config, run_dir)
    report = finetune(args.checkpoint, manifest, config.probe, config.seed,
                      encoder_lr_scale=args.encoder_lr_scale)
    write_metrics(run_dir / "finetune-metrics.jsonl", report, "finetune", "test")
    print(f"finetune test macro_f1={report.macro_f1:.5f}")
    return 0


def cmd_temporal(args) -> int:
    config, run_dir = _prepare(args)
    manifest, features = _features_for(args, config, run_dir)
    report = temporal_train(
        features, config.mstcn, config.probe, config.seed,
        n_classes=manifest.n_classes,
    )
    write_metrics(run_dir / "temporal-metrics.jsonl", report, "temporal", "test")
    print(f"temporal test macro_f1={report.macro_f1:.5f} "
          f"video_f1={report.video_f1:.5f}")
    return 0


def cmd_lowshot(args) -> int:
    config, run_dir = _prepare(args)
    manifest = ensure_dataset(config, run_dir)
    rows = lowshot_curve(
        args.checkpoint, manifest, config.fractions, config.repetitions,
        config.probe, config.seed, cache_dir=run_dir / "features",
    )
    path = write_lowshot_csv(rows, run_dir / "lowshot.csv")
    for row in rows:
        print(f"fraction {row.fraction:>5.2f}: macro_f1 {row.mean_f1:.5f} "
              f"+- {row.std_f1:.5f}")
    print(f"table: {path}")
    return 0


def _apply_axis(config: RunConfig, axis: str, value) -> RunConfig:
    if axis == "prototypes":
        return dataclasses.replace(config, n_prototypes=int(value))
    if axis == "mask":
        keep = 1.0 - float(value) / 100.0
        views = dataclasses.replace(config.views, keep_fraction=keep)
        return dataclasses.replace(config, views=views)
    if axis == "focal":
        views = dataclasses.replace(config.views, n_focal=int(value))
        return dataclasses.replace(config, views=views)
    if axis == "augment":
        parts = set(str(value).split("+"))
        augment = dataclasses.replace(
            config.views.augment,
            color_jitter="jit" in parts,
            horizontal_flip="flip" in parts,
            gaussian_blur="blur" in parts,
        )
        views = dataclasses.replace(config.views, augment=augment)
        return dataclasses.replace(config, views=views)
    if axis == "collapse":
        value = str(value)
        if value == "sk+memax":
            return config
        if value == "sk":
            trainer = dataclasses.replace(config.trainer, me_max_weight=0.0)
            return dataclasses.replace(config, trainer=trainer)
        if value == "none":
            trainer = dataclasses.replace(
                config.trainer, me_max_weight=0.0, sinkhorn_iters=0
            )
            return dataclasses.replace(config, trainer=trainer)
        raise ConfigError(f"unknown collapse setting {value!r}")
    if axis == "epochs":
        trainer = dataclasses.replace(config.trainer, epochs=int(value))
        return dataclasses.replace(config, trainer=trainer)
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")


def cmd_ablate(args) -> int:
    config, run_dir = _prepare(args)
    if args.axis not in ABLATION_AXES:
        raise ConfigError(
            f"unknown ablation axis {args.axis!r}; choose from {sorted(ABLATION_AXES)}"
        )
    values = ABLATION_AXES[args.axis]
    if args.values is not None:
        raw = [v.strip() for v in args.values.split(",") if v.strip()]
        values = raw if args.axis in ("augment", "collapse") else [int(v) for v in raw]
    rows = []
    for value in values:
        cell_config = _apply_axis(config, args.axis, value)
        cell_dir = run_dir / f"cell-{args.axis}-{str(value).replace('+', '_')}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        manifest = ensure_dataset(cell_config, cell_dir if cell_config.synth else run_dir)
        ckpt = pretrain(
            manifest, cell_config.encoder, cell_config.trainer, cell_dir,
            view_config=cell_config.views,
            n_prototypes=cell_config.n_prototypes,
            tau_anchor=cell_config.tau_anchor,
            tau_target=cell_config.tau_target,
        )
        features = extract_features(ckpt, manifest, cache_dir=cell_dir / "features")
        result = linear_probe(
            features, cell_config.probe, cell_config.seed,
            n_classes=manifest.n_classes,
        )
        last = _last_log_record(cell_dir / METRICS_LOG_NAME)
        val_f1 = result.val_report.macro_f1 if result.val_report else float("nan")
        rows.append({
            "axis": args.axis,
            "value": value,
            "val_macro_f1": val_f1,
            "test_macro_f1": result.report.macro_f1,
            "final_usage_entropy": last.get("usage_entropy", float("nan")),
        })
        print(f"{args.axis}={value}: val_macro_f1={val_f1:.5f}")
    out = run_dir / "ablate.csv"
    with out.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    print(f"table: {out}")
    return 0


def _last_log_record(path: Path) -> dict:
    if not path.exists():
        return {}
    last: dict = {}
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                last = json.loads(line)
    return last


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    if not run_dir.exists():
        raise ConfigError(f"run directory not found: {run_dir}")
    rows = []
    for name in ("probe-metrics.jsonl", "finetune-metrics.jsonl",
                 "temporal-metrics.jsonl"):
        path = run_dir / name
        if not path.exists():
            continue
        with path.open("r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    rows.append({
                        "evaluation": rec["evaluation"],
                        "split": rec["split"],
                        "macro_f1": rec["macro_f1"],
                        "video_f1": rec["video_f1"],
                    })
    lowshot_path = run_dir / "lowshot.csv"
    lowshot_rows = []
    if lowshot_path.exists():
        with lowshot_path.open("r", encoding="utf-8", newline="") as fh:
            lowshot_rows = list(csv.DictReader(fh))

    lines = [f"run report: {run_dir}", ""]
    header = f"{'evaluation':<16} {'split':<6} {'macro_f1':>9} {'video_f1':>9}"
    lines.append(header)
    lines.append("-" * len(header))
    for r in rows:
        vf1 = "-" if r["video_f1"] is None else f"{r['video_f1']:.5f}"
        lines.append(
            f"{r['evaluation']:<16} {r['split']:<6} {r['macro_f1']:>9.5f} {vf1:>9}"
        )
    if lowshot_rows:
        lines.append("")
        lines.append("low-shot curve (test macro_f1):")
        for r in lowshot_rows:
            lines.append(
                f"  fraction {float(r['fraction']):>5.2f}: "
                f"{float(r['mean_macro_f1']):.5f} +- {float(r['std_macro_f1']):.5f}"
            )
    text = "\n".join(lines) + "\n"
    print(text, end="")
    (run_dir / "report.txt").write_text(text, encoding="utf-8")
    with (run_dir / "report.csv").open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["evaluation", "split", "macro_f1", "video_f1"])
        for r in rows:
            writer.writerow([r["evaluation"], r["split"], r["macro_f1"],
                             "" if r["video_f1"] is None else r["video_f1"]])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msnlearn",
        description="Masked-siamese pretraining and evaluation pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--run", default=None, help="run directory")
        p.add_argument("--seed", type=int, default=None, help="override run seed")
        p.add_argument("--strict-deterministic", action="store_true",
                       help="single-threaded, bit-reproducible execution")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="pretrained checkpoint")

    add_common(sub.add_parser("synth", help="generate the synthetic dataset"))
    add_common(sub.add_parser("pretrain", help="self-supervised pretraining"))
    add_common(sub.add_parser("extract", help="extract frozen features"), checkpoint=True)
    add_common(sub.add_parser("probe", help="linear probe on frozen features"), checkpoint=True)
    p_ft = sub.add_parser("finetune", help="end-to-end fine-tuning")
    add_common(p_ft, checkpoint=True)
    p_ft.add_argument("--encoder-lr-scale", type=float, default=0.1)
    add_common(sub.add_parser("temporal", help="temporal model on frozen features"), checkpoint=True)
    add_common(sub.add_parser("lowshot", help="low-shot annotation-efficiency curve"), checkpoint=True)
    p_ab = sub.add_parser("ablate", help="run one ablation axis as a sweep")
    add_common(p_ab)
    p_ab.add_argument("--axis", required=True, help=f"one of {sorted(ABLATION_AXES)}")
    p_ab.add_argument("--values", default=None, help="comma-separated override values")

    p_rep = sub.add_parser("report", help="consolidate metrics of a run directory")
    p_rep.add_argument("--run", required=True, help="run directory")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "extract": cmd_extract,
    "probe": cmd_probe,
    "finetune": cmd_finetune,
    "temporal": cmd_temporal,
    "lowshot": cmd_lowshot,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # Desk-scale models run fastest (and reproducibly) single-threaded.
    torch.set_num_threads(1)
    if getattr(args, "strict_deterministic", False):
        enable_strict_determinism()
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except MSNLearnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
