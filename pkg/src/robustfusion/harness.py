"""Experiment driver: dataset generation, training sweeps, corrupted evaluation, result store."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import __version__
from .corruption import CorruptionSpec, apply, benchmark_ladder
from .detector import (
    Anchor,
    Detector,
    DetectorConfig,
    TrainSchedule,
    extract_features,
    read_history,
    train,
    write_history,
)
from .fusion import VARIANTS, FusionConfig, resolve_variant
from .geometry import BevGridSpec
from .metrics import delta_map, evaluate
from .scene import N_CLASSES, LidarModel, SceneConfig, frame_keys, make_frame, read_dataset, write_dataset

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
AUGMENTED_SUFFIX = "+aug"
RESULTS_FILE = "results.jsonl"


class ConfigError(ValueError):
    pass


class ExperimentError(RuntimeError):
    pass


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class DatasetConfig:
    global_seed: int = 0
    train_frames: int = 200
    eval_frames: int = 60
    lidar_layers: int = 32
    scene: SceneConfig = SceneConfig()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scene"] = self.scene.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "scene" in d:
            d["scene"] = SceneConfig.from_dict(d["scene"])
        return cls(**d)

    def digest(self) -> str:
        return content_hash({"dataset": self.to_dict(), "code": __version__})


def default_schedule() -> TrainSchedule:
    """The step-down fusion schedule preceded by 18 pretraining epochs."""
    return TrainSchedule(pretrain_epochs=18)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = DatasetConfig()
    variants: tuple[str, ...] = VARIANTS
    augmented: tuple[str, ...] = ("conv_ed_se",)
    ladder: tuple[CorruptionSpec, ...] = field(default_factory=lambda: tuple(benchmark_ladder()))
    schedule: TrainSchedule = field(default_factory=default_schedule)
    fusion: FusionConfig = FusionConfig(fc_hidden=32)
    seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str = "runs/default"
    workers: int = 0  # 0: one per CPU
    yaw_period: float = math.pi

    def __post_init__(self):
        object.__setattr__(self, "variants", tuple(resolve_variant(v) for v in self.variants))
        object.__setattr__(self, "augmented", tuple(resolve_variant(v) for v in self.augmented))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "ladder", tuple(self.ladder))
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.variants and not self.augmented:
            raise ConfigError("no variants to sweep")
        if len(set(self.variants)) != len(self.variants):
            raise ConfigError("duplicate variants")
        for spec in self.ladder:
            if spec.kind == "layer_removal" and spec.layer_target > self.dataset.lidar_layers:
                raise ConfigError(f"layer target {spec.layer_target} exceeds the {self.dataset.lidar_layers}-layer sensor")
            if spec.kind == "none":
                raise ConfigError("the uncorrupted cell is implicit; remove 'none' from the ladder")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset": self.dataset.to_dict(),
            "variants": list(self.variants),
            "augmented": list(self.augmented),
            "ladder": [s.to_dict() for s in self.ladder],
            "schedule": self.schedule.to_dict(),
            "fusion": self.fusion.to_dict(),
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "workers": self.workers,
            "yaw_period": self.yaw_period,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version!r}; expected {SCHEMA_VERSION}")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kw: dict = {}
        try:
            for k, v in d.items():
                if k == "dataset":
                    kw[k] = DatasetConfig.from_dict(v)
                elif k == "ladder":
                    kw[k] = tuple(CorruptionSpec.from_dict(s) for s in v)
                elif k == "schedule":
                    kw[k] = TrainSchedule.from_dict(v)
                elif k == "fusion":
                    kw[k] = FusionConfig(**v)
                elif k in ("variants", "augmented", "seeds"):
                    kw[k] = tuple(v)
                else:
                    kw[k] = v
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(data)


def save_config(path: str | os.PathLike, config: ExperimentConfig) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def content_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ---------------------------------------------------------------- parallel helpers


def _limit_threads() -> None:
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pass


def resolve_workers(workers: int) -> int:
    return max(1, workers if workers > 0 else (os.cpu_count() or 1))


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Order-preserving map over a process pool; inline when one worker suffices."""
    workers = min(resolve_workers(workers), max(1, len(items)))
    if workers == 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers, initializer=_limit_threads) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


# ---------------------------------------------------------------- dataset


@dataclass
class Dataset:
    train: list
    eval: list
    root: Path | None = None


def _make_train(args):
    cfg, key = args
    return make_frame(cfg.global_seed, key, cfg.scene, LidarModel.default(cfg.lidar_layers))


def generate_dataset(cfg: DatasetConfig, workers: int = 1) -> Dataset:
    keys = frame_keys("train", cfg.train_frames) + frame_keys("eval", cfg.eval_frames)
    frames = parallel_map(_make_train, [(cfg, k) for k in keys], workers)
    return Dataset(frames[: cfg.train_frames], frames[cfg.train_frames :])


def dataset_meta(cfg: DatasetConfig) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "layer_count": cfg.lidar_layers,
        "scene": cfg.scene.to_dict(),
    }


def write_splits(root: str | Path, ds: Dataset, cfg: DatasetConfig) -> None:
    root = Path(root)
    meta = dataset_meta(cfg)
    write_dataset(root / "train", ds.train, {**meta, "split": "train"})
    write_dataset(root / "eval", ds.eval, {**meta, "split": "eval"})


def read_splits(root: str | Path) -> tuple[Dataset, dict]:
    root = Path(root)
    tr, meta = read_dataset(root / "train")
    ev, _ = read_dataset(root / "eval")
    return Dataset(tr, ev, root), meta


def obtain_dataset(cfg: DatasetConfig, root: str | Path, workers: int = 1) -> Dataset:
    """Read the dataset under ``root`` if it was built from ``cfg``, else generate and write it."""
    root = Path(root)
    manifest = root / "eval" / "dataset.json"
    if manifest.exists():
        meta = json.loads(manifest.read_text())
        if meta.get("config_hash") == cfg.digest():
            ds, _ = read_splits(root)
            return ds
        raise ExperimentError(f"{root} holds a dataset built from a different configuration")
    ds = generate_dataset(cfg, workers)
    write_splits(root, ds, cfg)
    ds.root = root
    return ds


# ---------------------------------------------------------------- results


@dataclass(frozen=True)
class ResultRow:
    variant: str
    corruption: str
    severity: str
    seed: int
    map: float | None
    nds: float | None
    ate: float | None
    ase: float | None
    aoe: float | None
    delta_map: float | None
    runtime: float
    cell: str = ""
    error: str | None = None
    note: str | None = None

    METRIC_FIELDS = ("map", "nds", "ate", "ase", "aoe", "delta_map")

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRow":
        return cls(**d)

    def metrics(self) -> tuple:
        """Everything except wall-clock runtime; bitwise stable across reruns."""
        return (self.variant, self.corruption, self.severity, self.seed) + tuple(getattr(self, f) for f in self.METRIC_FIELDS)


class ResultStore:
    """Append-only JSON-lines record file; the last record for a cell wins."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def load(self) -> dict[str, ResultRow]:
        out: dict[str, ResultRow] = {}
        if not self.path.exists():
            return out
        for line in self.path.read_text().splitlines():
            if line.strip():
                row = ResultRow.from_dict(json.loads(line))
                out[row.cell] = row
        return out

    def append(self, rows: Iterable[ResultRow]) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a") as fh:
            for r in rows:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())


CSV_FIELDS = ("variant", "corruption", "severity", "seed", "map", "nds", "ate", "ase", "aoe", "delta_map", "runtime", "error", "note")


def _csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    s = str(v)
    return '"' + s.replace('"', '""') + '"' if any(c in s for c in ',"\n') else s


def write_csv(path: str | Path, rows: Sequence[ResultRow]) -> None:
    lines = [",".join(CSV_FIELDS)]
    lines += [",".join(_csv_value(getattr(r, f)) for f in CSV_FIELDS) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- cells


@dataclass(frozen=True)
class ModelCell:
    variant: str
    augmented: bool
    seed: int

    @property
    def label(self) -> str:
        return self.variant + (AUGMENTED_SUFFIX if self.augmented else "")


def model_cells(cfg: ExperimentConfig) -> list[ModelCell]:
    cells = [ModelCell(v, False, s) for v in cfg.variants for s in cfg.seeds]
    cells += [ModelCell(v, True, s) for v in cfg.augmented for s in cfg.seeds]
    return cells


def _schedule_for(cfg: ExperimentConfig, cell: ModelCell) -> TrainSchedule:
    return dataclasses.replace(cfg.schedule, augment_last_epoch=cell.augmented)


def training_hash(cfg: ExperimentConfig, cell: ModelCell) -> str:
    return content_hash(
        {
            "dataset": cfg.dataset.digest(),
            "fusion": cfg.fusion.to_dict(),
            "schedule": _schedule_for(cfg, cell).to_dict(),
            "variant": cell.variant,
            "seed": cell.seed,
            "code": __version__,
        }
    )


def eval_hash(cfg: ExperimentConfig, cell: ModelCell, spec: CorruptionSpec) -> str:
    return content_hash({"model": training_hash(cfg, cell), "corruption": spec.to_dict(), "yaw_period": cfg.yaw_period})


def evaluation_specs(cfg: ExperimentConfig) -> list[CorruptionSpec]:
    return [CorruptionSpec.none(cfg.dataset.global_seed)] + list(cfg.ladder)


def severity_of(spec: CorruptionSpec) -> str:
    return spec.severity_label


# ---------------------------------------------------------------- feature bank


@dataclass
class FeatureBank:
    """Clean training features plus eval features for every corruption in the sweep."""

    grid: BevGridSpec
    anchor: Anchor
    train_boxes: list
    train: tuple[np.ndarray, np.ndarray]
    eval_boxes: list
    eval: dict[str, tuple[np.ndarray, np.ndarray]]
    train_frames: list


def _features(args):
    frame, spec, grid = args
    return extract_features(apply(frame, spec), grid)


def stack_features(frames, spec: CorruptionSpec, grid: BevGridSpec, workers: int = 1):
    feats = parallel_map(_features, [(f, spec, grid) for f in frames], workers)
    return np.stack([a for a, _ in feats]), np.stack([b for _, b in feats])


def spec_key(spec: CorruptionSpec) -> str:
    return content_hash(spec.to_dict())


def build_feature_bank(ds: Dataset, specs: Sequence[CorruptionSpec], grid: BevGridSpec, workers: int = 1) -> FeatureBank:
    train_feats = stack_features(ds.train, CorruptionSpec.none(), grid, workers)
    ev = {spec_key(s): stack_features(ds.eval, s, grid, workers) for s in specs}
    anchor = Anchor.from_boxes([b for f in ds.train for b in f.boxes])
    return FeatureBank(
        grid, anchor, [f.boxes for f in ds.train], train_feats, [f.boxes for f in ds.eval], ev, list(ds.train)
    )


# ---------------------------------------------------------------- running


_BANK: FeatureBank | None = None


def _init_worker(bank: FeatureBank) -> None:
    global _BANK
    _BANK = bank
    _limit_threads()


@dataclass(frozen=True)
class _Job:
    cfg: ExperimentConfig
    cell: ModelCell
    pending: tuple[int, ...]  # indices into evaluation_specs
    model_dir: str


def _detector_config(cfg: ExperimentConfig, bank: FeatureBank) -> DetectorConfig:
    return DetectorConfig(grid=bank.grid, fusion=cfg.fusion, anchor=bank.anchor, n_classes=N_CLASSES)


def _train_or_load(job: _Job, bank: FeatureBank) -> tuple[Detector, bool]:
    cfg, cell = job.cfg, job.cell
    h = training_hash(cfg, cell)
    ckpt = Path(job.model_dir) / f"{h}.ckpt"
    dcfg = _detector_config(cfg, bank)
    if ckpt.exists():
        return Detector(cell.variant, dcfg, cell.seed).load(ckpt).eval(), False
    res = train(bank.train_frames, cell.variant, _schedule_for(cfg, cell), cell.seed, dcfg, features=bank.train)
    Path(job.model_dir).mkdir(parents=True, exist_ok=True)
    tmp = ckpt.with_suffix(".tmp")
    res.model.save(tmp)
    write_history(Path(job.model_dir) / f"{h}.history.tsv", res.history)
    os.replace(tmp, ckpt)
    return res.model, True


def _run_job(job: _Job) -> list[ResultRow]:
    bank = _BANK
    assert bank is not None, "feature bank not initialised"
    cfg, cell = job.cfg, job.cell
    specs = evaluation_specs(cfg)
    try:
        model, _ = _train_or_load(job, bank)
    except Exception as exc:  # a failed training fails every cell of the model
        note = f"training failed: {type(exc).__name__}: {exc}"
        log.error("%s seed %d: %s", cell.label, cell.seed, note)
        return [_error_row(cfg, cell, specs[i], note, 0.0) for i in job.pending]

    baseline: float | None = None
    rows = []
    for i, spec in enumerate(specs):
        if i not in job.pending and i != 0:
            continue
        t0 = time.perf_counter()
        try:
            lidar, camera = bank.eval[spec_key(spec)]
            dets = model.predict(lidar, camera)
            res = evaluate(dets, bank.eval_boxes, range(N_CLASSES), yaw_period=cfg.yaw_period)
            if i == 0:
                baseline = res.map
            d = err = note = None
            if baseline is None:
                err = "baseline evaluation failed"
            elif baseline > 0:
                d = 0.0 if i == 0 else delta_map(baseline, res.map)
            else:
                note = "zero baseline mAP; delta undefined"
            row = ResultRow(
                cell.label, spec.kind, severity_of(spec), cell.seed, res.map, res.nds,
                res.errors.ate, res.errors.ase, res.errors.aoe, d,
                time.perf_counter() - t0, eval_hash(cfg, cell, spec), err, note,
            )
        except Exception as exc:
            row = _error_row(cfg, cell, spec, f"{type(exc).__name__}: {exc}", time.perf_counter() - t0)
        if i in job.pending:
            rows.append(row)
    return rows


def _error_row(cfg, cell: ModelCell, spec: CorruptionSpec, note: str, runtime: float) -> ResultRow:
    return ResultRow(
        cell.label, spec.kind, severity_of(spec), cell.seed, None, None, None, None, None, None,
        runtime, eval_hash(cfg, cell, spec), note,
    )


@dataclass
class ExperimentResult:
    rows: list[ResultRow]
    output_dir: Path
    trained: int
    evaluated: int
    runtime: float

    @property
    def failures(self) -> list[ResultRow]:
        return [r for r in self.rows if not r.ok]


def ordered_rows(cfg: ExperimentConfig, rows: dict[str, ResultRow]) -> list[ResultRow]:
    out = []
    specs = evaluation_specs(cfg)
    for cell in model_cells(cfg):
        for spec in specs:
            r = rows.get(eval_hash(cfg, cell, spec))
            if r is not None:
                out.append(r)
    return out


def run_experiment(
    cfg: ExperimentConfig,
    dataset: Dataset | None = None,
    progress: Callable[[str], None] | None = None,
) -> ExperimentResult:
    """Train every (variant, seed) model and evaluate it on every corruption cell.

    Completed cells found in the result store are skipped, and trained
    checkpoints are reused, so a rerun of a finished experiment does no work.
    """
    t_start = time.perf_counter()
    say = progress or (lambda msg: log.info(msg))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.json", cfg)
    store = ResultStore(out / RESULTS_FILE)
    done = {h: r for h, r in store.load().items() if r.ok}

    specs = evaluation_specs(cfg)
    jobs = []
    for cell in model_cells(cfg):
        pending = tuple(i for i, s in enumerate(specs) if eval_hash(cfg, cell, s) not in done)
        if pending:
            jobs.append(_Job(cfg, cell, pending, str(out / "models")))
    n_pending = sum(len(j.pending) for j in jobs)
    say(f"{len(model_cells(cfg))} models x {len(specs)} cells; {n_pending} cells to run")

    trained = 0
    if jobs:
        workers = resolve_workers(cfg.workers)
        ds = dataset or obtain_dataset(cfg.dataset, out / f"dataset-{cfg.dataset.digest()[:12]}", workers)
        pending_specs = sorted({i for j in jobs for i in j.pending} | {0})
        bank = build_feature_bank(ds, [specs[i] for i in pending_specs], BevGridSpec(), workers)
        trained = sum(1 for j in jobs if not (Path(j.model_dir) / f"{training_hash(cfg, j.cell)}.ckpt").exists())
        if workers == 1 or len(jobs) == 1:
            _init_worker(bank)
            for j in jobs:
                rows = _run_job(j)
                store.append(rows)
                say(f"{j.cell.label} seed {j.cell.seed}: {len(rows)} cells")
                done.update({r.cell: r for r in rows})
        else:
            with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), initializer=_init_worker, initargs=(bank,)) as pool:
                for j, rows in zip(jobs, pool.map(_run_job, jobs)):
                    store.append(rows)
                    say(f"{j.cell.label} seed {j.cell.seed}: {len(rows)} cells")
                    done.update({r.cell: r for r in rows})
    all_rows = store.load()
    rows = ordered_rows(cfg, all_rows)
    write_csv(out / "results.csv", rows)
    return ExperimentResult(rows, out, trained, n_pending, time.perf_counter() - t_start)


def load_results(output_dir: str | Path, cfg: ExperimentConfig | None = None) -> list[ResultRow]:
    out = Path(output_dir)
    rows = ResultStore(out / RESULTS_FILE).load()
    if cfg is None and (out / "config.json").exists():
        cfg = load_config(out / "config.json")
    if cfg is None:
        return list(rows.values())
    return ordered_rows(cfg, rows)


def toy_config(output_dir: str = "runs/toy", **changes) -> ExperimentConfig:
    """A small sweep for smoke tests: 2 variants, one seed, a short schedule."""
    base = ExperimentConfig(
        dataset=DatasetConfig(train_frames=24, eval_frames=8),
        variants=("concat", "conv_se"),
        augmented=(),
        ladder=(CorruptionSpec.layers(16), CorruptionSpec.points(0.5), CorruptionSpec.misalign(1.0, 0.0)),
        schedule=TrainSchedule(epochs=2, lr_stages=((1, 1e-3), (2, 1e-4)), pretrain_epochs=10),
        seeds=(0,),
        output_dir=output_dir,
        workers=1,
    )
    return base.replace(**changes)
