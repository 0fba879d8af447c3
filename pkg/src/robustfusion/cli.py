"""Command-line entry point: synth, corrupt, train, eval, sweep, report, selftest.

Exit status: 0 success, 1 usage or configuration error, 2 selftest failure,
3 experiment failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_SELFTEST, EXIT_EXPERIMENT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
    p.add_argument("--config", type=Path, default=None, help="experiment config (JSON)")
    p.add_argument("--out", type=Path, default=None, help="output directory or file")


def _corruption_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("corruption (pick one kind)")
    g.add_argument("--layers", type=int, help="keep this many LiDAR layers")
    g.add_argument("--anchor", type=int, default=None, help="ring the kept layer set must contain")
    g.add_argument("--keep-ratio", type=float, help="keep each point with this probability")
    g.add_argument("--translation", type=float, help="misalignment translation limit, metres")
    g.add_argument("--rotation-deg", type=float, help="misalignment rotation limit, degrees")
    g.add_argument("--corruption-seed", type=int, default=None, help="seed of the corruption streams")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="robustfusion", description="LiDAR-camera fusion robustness benchmark on synthetic scenes")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic train/eval dataset")
    _common(s)
    s.add_argument("--train-frames", type=int, default=None)
    s.add_argument("--eval-frames", type=int, default=None)

    s = sub.add_parser("corrupt", help="write a corrupted copy of a dataset")
    _common(s)
    s.add_argument("--data", type=Path, required=True, help="dataset root or split directory")
    _corruption_args(s)

    s = sub.add_parser("train", help="train one detector")
    _common(s)
    s.add_argument("--variant", required=True)
    s.add_argument("--augment", action="store_true", help="misalign calibrations in the final epoch")
    s.add_argument("--data", type=Path, default=None, help="dataset root (generated from the config if absent)")

    s = sub.add_parser("eval", help="evaluate a trained detector, optionally under corruption")
    _common(s)
    s.add_argument("--model", type=Path, required=True, help="directory written by 'train'")
    s.add_argument("--data", type=Path, required=True, help="dataset root or split directory")
    _corruption_args(s)

    s = sub.add_parser("sweep", help="run the full variant x seed x corruption sweep")
    _common(s)
    s.add_argument("--workers", type=int, default=None)

    s = sub.add_parser("report", help="tables and plots from a sweep's results")
    _common(s)
    s.add_argument("--results", type=Path, required=True, help="sweep output directory")

    s = sub.add_parser("selftest", help="gradient, oracle and determinism suites")
    _common(s)
    s.add_argument("--quick", action="store_true")
    return p


# ---------------------------------------------------------------- helpers


def _config(args):
    from .harness import ExperimentConfig, load_config

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.replace(dataset=dataclasses.replace(cfg.dataset, global_seed=args.seed))
    return cfg


def _spec_from_args(args, default_seed: int):
    from .corruption import CorruptionSpec

    seed = args.corruption_seed if args.corruption_seed is not None else default_seed
    chosen = [
        args.layers is not None,
        args.keep_ratio is not None,
        args.translation is not None or args.rotation_deg is not None,
    ]
    if sum(chosen) > 1:
        raise UsageError("choose one corruption kind")
    if args.layers is not None:
        return CorruptionSpec.layers(args.layers, seed, args.anchor)
    if args.keep_ratio is not None:
        return CorruptionSpec.points(args.keep_ratio, seed)
    if chosen[2]:
        return CorruptionSpec.misalign(args.translation or 0.0, math.radians(args.rotation_deg or 0.0), seed)
    return CorruptionSpec.none(seed)


def _split_dirs(root: Path) -> list[Path]:
    from .scene import DATASET_MANIFEST

    if (root / DATASET_MANIFEST).exists():
        return [root]
    splits = [root / s for s in ("train", "eval") if (root / s / DATASET_MANIFEST).exists()]
    if not splits:
        raise UsageError(f"{root} is not a dataset directory")
    return splits


def _eval_split(root: Path) -> Path:
    dirs = _split_dirs(root)
    return dirs[-1] if len(dirs) > 1 else dirs[0]


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .harness import generate_dataset, write_splits

    cfg = _config(args).dataset
    changes = {k: v for k, v in (("train_frames", args.train_frames), ("eval_frames", args.eval_frames)) if v is not None}
    cfg = dataclasses.replace(cfg, **changes)
    out = args.out or Path(f"data/synth-seed{cfg.global_seed}")
    write_splits(out, generate_dataset(cfg), cfg)
    print(f"wrote {cfg.train_frames} train and {cfg.eval_frames} eval frames to {out}")
    return EXIT_OK


def cmd_corrupt(args) -> int:
    from .corruption import apply
    from .scene import read_dataset, write_dataset

    seed = args.seed if args.seed is not None else 0
    spec = _spec_from_args(args, seed)
    src = args.data.resolve()
    out_root = args.out or src.with_name(f"{src.name}-{spec.kind}-{spec.severity_label.replace(' ', '')}")
    for split in _split_dirs(src):
        frames, meta = read_dataset(split)
        dst = out_root if split == src else out_root / split.name
        meta = {**meta, "corruption": spec.to_dict(), "source": str(split)}
        meta.pop("frames", None)
        write_dataset(dst, [apply(f, spec) for f in frames], meta)
        print(f"{split} -> {dst} ({spec.kind}, {spec.severity_label})")
    return EXIT_OK


def _model_meta(path: Path) -> dict:
    return json.loads((path / "model.json").read_text())


def cmd_train(args) -> int:
    from .detector import DetectorConfig, train, write_history
    from .harness import ModelCell, _schedule_for, build_feature_bank, obtain_dataset, read_splits
    from .corruption import CorruptionSpec
    from .geometry import BevGridSpec
    from .fusion import resolve_variant

    cfg = _config(args)
    variant = resolve_variant(args.variant)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out = args.out or Path(f"models/{variant}{'-aug' if args.augment else ''}-seed{seed}")
    if args.data is not None:
        ds, _ = read_splits(args.data)
    else:
        ds = obtain_dataset(cfg.dataset, out / "dataset")
    bank = build_feature_bank(ds, [CorruptionSpec.none()], BevGridSpec())
    dcfg = DetectorConfig(grid=bank.grid, fusion=cfg.fusion, anchor=bank.anchor)
    schedule = _schedule_for(cfg, ModelCell(variant, args.augment, seed))
    t0 = time.perf_counter()
    res = train(ds.train, variant, schedule, seed, dcfg, features=bank.train)
    out.mkdir(parents=True, exist_ok=True)
    res.model.save(out / "model.ckpt")
    write_history(out / "history.tsv", res.history)
    meta = {
        "variant": variant,
        "seed": seed,
        "augmented": bool(args.augment),
        "fusion": cfg.fusion.to_dict(),
        "anchor": dataclasses.asdict(bank.anchor),
        "grid": dataclasses.asdict(bank.grid),
        "schedule": schedule.to_dict(),
    }
    (out / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(f"trained {variant} seed {seed} in {time.perf_counter() - t0:.1f}s; final loss {res.history[-1].loss:.4f}; saved to {out}")
    return EXIT_OK


def load_model(path: Path):
    from .detector import Anchor, Detector, DetectorConfig
    from .fusion import FusionConfig
    from .geometry import BevGridSpec

    meta = _model_meta(path)
    grid = meta["grid"]
    dcfg = DetectorConfig(
        grid=BevGridSpec(tuple(grid["x_range"]), tuple(grid["y_range"]), grid["H"], grid["W"]),
        fusion=FusionConfig(**meta["fusion"]),
        anchor=Anchor(**meta["anchor"]),
    )
    return Detector(meta["variant"], dcfg, meta["seed"]).load(path / "model.ckpt").eval(), meta


def cmd_eval(args) -> int:
    from .harness import stack_features
    from .metrics import evaluate
    from .scene import N_CLASSES, read_dataset

    model, meta = load_model(args.model)
    spec = _spec_from_args(args, args.seed if args.seed is not None else 0)
    frames, _ = read_dataset(_eval_split(args.data))
    lidar, camera = stack_features(frames, spec, model.config.grid)
    res = evaluate(model.predict(lidar, camera), [f.boxes for f in frames], range(N_CLASSES), yaw_period=math.pi)
    record = {
        "variant": meta["variant"] + ("+aug" if meta.get("augmented") else ""),
        "seed": meta["seed"],
        "corruption": spec.to_dict(),
        "severity": spec.severity_label,
        "map": res.map,
        "nds": res.nds,
        "ate": res.errors.ate,
        "ase": res.errors.ase,
        "aoe": res.errors.aoe,
        "frames": len(frames),
    }
    text = json.dumps(record, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .harness import run_experiment
    from .report import emit_report

    cfg = _config(args)
    if args.out is not None:
        cfg = cfg.replace(output_dir=str(args.out))
    if args.workers is not None:
        cfg = cfg.replace(workers=args.workers)
    res = run_experiment(cfg, progress=print)
    if res.rows:
        emit_report(res.rows, Path(cfg.output_dir) / "report", cfg.dataset.lidar_layers)
    print(f"{len(res.rows)} rows, {len(res.failures)} failures, {res.trained} models trained, {res.runtime:.1f}s")
    for r in res.failures:
        print(f"FAILED {r.variant} seed {r.seed} {r.corruption} {r.severity}: {r.error}", file=sys.stderr)
    return EXIT_EXPERIMENT if res.failures else EXIT_OK


def cmd_report(args) -> int:
    from .harness import load_config, load_results
    from .report import emit_report

    rows = load_results(args.results)
    if not rows:
        raise UsageError(f"no results under {args.results}")
    cfg_path = args.results / "config.json"
    layers = load_config(cfg_path).dataset.lidar_layers if cfg_path.exists() else 32
    rep = emit_report(rows, args.out or args.results / "report", layers)
    for name in rep.files:
        print(name)
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    t0 = time.perf_counter()
    checks = run_selftest(quick=args.quick, say=print)
    failed = [c for c in checks if not c.ok]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed in {time.perf_counter() - t0:.1f}s")
    return EXIT_SELFTEST if failed else EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "corrupt": cmd_corrupt,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
    "selftest": cmd_selftest,
}


def main(argv: list[str] | None = None) -> int:
    from .harness import ConfigError, ExperimentError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"robustfusion {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExperimentError as exc:
        print(f"robustfusion {args.command}: {exc}", file=sys.stderr)
        return EXIT_EXPERIMENT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
