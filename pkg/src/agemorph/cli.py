"""Command-line interface.

Commands: gen-data, train, transform, evaluate, export-features. Options
come from flags plus an optional JSON config file; unknown config keys are
rejected with every offending key named. Each command echoes its effective
configuration (defaults included) to run_config.json in the output
directory. The AGEMORPH_OUT env var overrides the default output root.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .agecode import AgeCodeConfig
from .nets import NetworkConfig, transform_image
from .losses import LossWeights
from .phantom import AGE_HI, AGE_LO, build_dataset
from .train import AblationConfig, TrainConfig, load_transformer, run_training
from .volio import (
    dataset_arrays,
    load_manifest,
    load_volume,
    save_difference_png,
    save_manifest,
    save_png,
    save_volume,
    write_grid,
)


class ConfigError(ValueError):
    """Bad config file: unknown keys or invalid values."""


@dataclass(frozen=True)
class DataConfig:
    per_age: int = 10
    age_min: int = AGE_LO
    age_max: int = AGE_HI
    resolution: tuple[int, ...] = (64, 64)
    longitudinal_gap: int | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    net: NetworkConfig = field(default_factory=NetworkConfig)
    agecode: AgeCodeConfig = field(default_factory=AgeCodeConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _leaf_names(cls) -> dict:
    return {f.name: None for f in fields(cls)}


_SCHEMA = {
    "seed": None,
    "out_dir": None,
    "data": _leaf_names(DataConfig),
    "net": _leaf_names(NetworkConfig),
    "agecode": _leaf_names(AgeCodeConfig),
    "train": {
        **{f.name: None for f in fields(TrainConfig) if f.name not in ("weights", "ablation")},
        "weights": _leaf_names(LossWeights),
        "ablation": _leaf_names(AblationConfig),
    },
}


def _collect_unknown(doc, schema, prefix, unknown) -> None:
    for key, value in doc.items():
        if key not in schema:
            unknown.append(f"{prefix}{key}")
        elif isinstance(schema[key], dict):
            if isinstance(value, dict):
                _collect_unknown(value, schema[key], f"{prefix}{key}.", unknown)
            else:
                unknown.append(f"{prefix}{key} (expected a section)")


def build_run_config(doc: dict) -> RunConfig:
    """Validate and materialise a config document, defaults filled in."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown: list[str] = []
    _collect_unknown(doc, _SCHEMA, "", unknown)
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(sorted(unknown)))
    try:
        train_doc = dict(doc.get("train", {}))
        weights = LossWeights(**train_doc.pop("weights", {}))
        ablation = AblationConfig(**train_doc.pop("ablation", {}))
        data_doc = dict(doc.get("data", {}))
        if "resolution" in data_doc:
            data_doc["resolution"] = tuple(data_doc["resolution"])
        return RunConfig(
            seed=int(doc.get("seed", 0)),
            out_dir=doc.get("out_dir"),
            data=DataConfig(**data_doc),
            net=NetworkConfig(**doc.get("net", {})),
            agecode=AgeCodeConfig(**doc.get("agecode", {})),
            train=TrainConfig(**train_doc, weights=weights, ablation=ablation),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return build_run_config(doc)


def _resolve_out(flag_value, cfg: RunConfig, command: str) -> Path:
    if flag_value:
        return Path(flag_value)
    if cfg.out_dir:
        return Path(cfg.out_dir)
    root = os.environ.get("AGEMORPH_OUT", "runs")
    return Path(root) / command


def _echo_config(out_dir: Path, command: str, cfg: RunConfig, extra: dict) -> None:
    doc = {
        "command": command,
        "seed": cfg.seed,
        "data": dataclasses.asdict(cfg.data),
        "net": dataclasses.asdict(cfg.net),
        "agecode": dataclasses.asdict(cfg.agecode),
        "train": dataclasses.asdict(cfg.train),
        **extra,
    }
    with open(out_dir / "run_config.json", "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True, default=str)
        f.write("\n")


def _load_cfg_with_overrides(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    train_updates = {}
    for name in ("epochs", "batch_size"):
        if getattr(args, name, None) is not None:
            train_updates[name] = getattr(args, name)
    if getattr(args, "ablation", None):
        train_updates["ablation"] = AblationConfig.from_case(args.ablation)
    if getattr(args, "seed", None) is not None:
        train_updates["seed"] = args.seed
    if train_updates:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **train_updates))
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _load_cfg_with_overrides(args)
    data_updates = {}
    if args.per_age is not None:
        data_updates["per_age"] = args.per_age
    if args.resolution:
        data_updates["resolution"] = tuple(args.resolution)
    if args.longitudinal_gap is not None:
        data_updates["longitudinal_gap"] = args.longitudinal_gap
    if data_updates:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, **data_updates))

    out_dir = _resolve_out(args.out, cfg, "gen-data")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest = build_dataset(
        n_per_age=cfg.data.per_age,
        age_min=cfg.data.age_min,
        age_max=cfg.data.age_max,
        resolution=cfg.data.resolution,
        seed=cfg.seed,
        longitudinal_gap=cfg.data.longitudinal_gap,
    )
    from .volio import resolve_image

    records = []
    for rec in manifest.records:
        image = resolve_image(manifest, rec)
        ref = f"images/{rec.subject_id}_a{rec.age}.grid"
        save_volume(image, out_dir / ref)
        if args.png and image.ndim == 2:
            (out_dir / "previews").mkdir(exist_ok=True)
            save_png(image, out_dir / "previews" / f"{rec.subject_id}_a{rec.age}.png")
        records.append(dataclasses.replace(rec, image_ref=ref))
    manifest.records = records
    save_manifest(manifest, out_dir / "manifest.json")
    _echo_config(out_dir, "gen-data", cfg, {"n_images": len(records)})
    print(f"wrote {len(records)} images and manifest.json under {out_dir}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg_with_overrides(args)
    out_dir = _resolve_out(args.out, cfg, "train")
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    net_cfg = cfg.net
    if args.config is None or "dimensionality" not in _loaded_net_keys(args):
        net_cfg = dataclasses.replace(net_cfg, dimensionality=manifest.dimensionality)
    if net_cfg.dimensionality != manifest.dimensionality:
        raise ValueError(
            f"dimensionality mismatch: config says {net_cfg.dimensionality}-D, "
            f"manifest is {manifest.dimensionality}-D"
        )

    if args.regressor:
        from .evaluate import train_age_regressor

        out_path = out_dir / "regressor.pt"
        train_age_regressor(
            manifest,
            net_cfg,
            cfg.agecode,
            epochs=cfg.train.epochs,
            batch_size=cfg.train.batch_size,
            seed=cfg.train.seed,
            base_dir=manifest_path.parent,
            out_path=out_path,
        )
        _echo_config(out_dir, "train", cfg, {"mode": "regressor"})
        print(f"age regressor saved to {out_path}")
        return 0

    summary = run_training(
        manifest,
        net_cfg,
        cfg.agecode,
        cfg.train,
        out_dir,
        base_dir=manifest_path.parent,
        resume_from=args.resume,
    )
    _echo_config(out_dir, "train", cfg, {"mode": "transformer", "summary": summary})
    print(
        f"trained {summary['epochs_run']} epochs ({summary['global_step']} steps); "
        f"checkpoint at {summary['checkpoint']}"
    )
    return 0


def _loaded_net_keys(args) -> set:
    if not args.config:
        return set()
    try:
        with open(args.config) as f:
            doc = json.load(f)
        return set(doc.get("net", {}))
    except (OSError, json.JSONDecodeError):
        return set()


def _parse_sweep(spec: str) -> list[int]:
    try:
        start, stop, step = (int(p) for p in spec.split(":"))
    except ValueError:
        raise ValueError(f"age sweep must look like start:stop:step, got {spec!r}") from None
    if step < 1 or stop < start:
        raise ValueError(f"age sweep {spec!r} is empty")
    return list(range(start, stop + 1, step))


def cmd_transform(args) -> int:
    model, _, meta = load_transformer(args.checkpoint)
    cfg = RunConfig(net=meta["net_config"], agecode=meta["age_config"], train=meta["train_config"])
    out_dir = _resolve_out(args.out, cfg, "transform")
    out_dir.mkdir(parents=True, exist_ok=True)
    image = load_volume(args.input)
    want = meta["net_config"].dimensionality
    if image.ndim != want:
        raise ValueError(
            f"dimensionality mismatch: checkpoint is {want}-D, input is {image.ndim}-D"
        )
    targets = _parse_sweep(args.age_sweep) if args.age_sweep else [args.target_age]
    if targets == [None]:
        raise ValueError("pass --target-age or --age-sweep")

    from .evaluate import difference_map

    stem = Path(args.input).stem.replace(".nii", "")
    for t in targets:
        tag = f"{float(t):g}"
        out = transform_image(model, image, float(t))
        save_volume(out, out_dir / f"{stem}_to_a{tag}.grid")
        diff = difference_map(image.data, out.data)
        write_grid(diff.astype(np.float32), out_dir / f"{stem}_to_a{tag}_diff.grid")
        if image.ndim == 2:
            save_png(out, out_dir / f"{stem}_to_a{tag}.png")
            save_difference_png(diff, out_dir / f"{stem}_to_a{tag}_diff.png")
    _echo_config(out_dir, "transform", cfg, {"targets": [float(t) for t in targets]})
    print(f"wrote {len(targets)} transformed volumes under {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluate import evaluate_pairs, load_regressor

    model, _, meta = load_transformer(args.checkpoint)
    cfg = RunConfig(net=meta["net_config"], agecode=meta["age_config"], train=meta["train_config"])
    out_dir = _resolve_out(args.out, cfg, "evaluate")
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    regressor = None
    if args.regressor:
        regressor, _ = load_regressor(args.regressor)
    else:
        print("warning: no --regressor given, PAD will be skipped", file=sys.stderr)
    report = evaluate_pairs(
        model,
        manifest,
        base_dir=manifest_path.parent,
        regressor=regressor,
        age_cfg=meta["age_config"],
        pad_age_stride=args.pad_stride,
    )
    report.write_json(out_dir / "report.json")
    report.write_csv(out_dir / "report.csv")
    _echo_config(out_dir, "evaluate", cfg, {"report": report.as_dict()})
    pad_str = f"{report.pad:.3f}" if report.pad is not None else "skipped"
    print(
        f"pairs={report.n_pairs} psnr={report.psnr:.3f} ssim={report.ssim:.4f} "
        f"mse={report.mse:.5f} pad={pad_str}"
    )
    return 0


def cmd_export_features(args) -> int:
    from .evaluate import export_features

    model, _, meta = load_transformer(args.checkpoint)
    cfg = RunConfig(net=meta["net_config"], agecode=meta["age_config"], train=meta["train_config"])
    out_dir = _resolve_out(args.out, cfg, "export-features")
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    images, ages, ids = dataset_arrays(manifest, manifest_path.parent)
    summary = export_features(model, images, ids, ages, out_dir / "features.csv")
    with open(out_dir / "features_summary.json", "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
        f.write("\n")
    _echo_config(out_dir, "export-features", cfg, {"summary": summary})
    print(
        f"exported {summary['n']} feature rows; "
        f"mean |cos(age, identity)| = {summary['mean_abs_cosine']:.4f}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agemorph",
        description="Identity-preserving age transformation on procedural phantoms",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a phantom dataset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--per-age", dest="per_age", type=int)
    p.add_argument(
        "--res", dest="resolution", type=int, nargs="+", help="grid extents (2 or 3)"
    )
    p.add_argument("--longitudinal-gap", dest="longitudinal_gap", type=int)
    p.add_argument("--png", action="store_true", help="also write PNG previews")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the transformer (or the PAD regressor)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--ablation", choices=["full", "case1", "case2", "case3", "case4"])
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument(
        "--regressor", action="store_true", help="train the standalone age regressor"
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transform", help="age-transform one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--target-age", dest="target_age", type=float)
    p.add_argument("--age-sweep", dest="age_sweep", help="start:stop:step, inclusive")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("evaluate", help="score a checkpoint on longitudinal pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--regressor", help="age-regressor checkpoint for PAD")
    p.add_argument("--pad-stride", dest="pad_stride", type=int, default=4)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-features", help="dump age/identity feature vectors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_export_features)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
