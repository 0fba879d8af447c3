"""Toy BEV detector: pillar and camera-lift encoders, a fusion step, an anchor head.

The head predicts, per BEV cell, one sigmoid logit per class and an
8-value regression ``(dx, dy, dz, log l, log w, log h, sin 2yaw, cos 2yaw)``
relative to a single square anchor centred in the cell. Boxes in the
synthetic scenes are front/back symmetric, so yaw is regressed with period
pi.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .corruption import CorruptionSpec, apply
from .fusion import FusionConfig, FusionStep, add_bn, add_conv, bn, conv, conv_bn_relu
from .geometry import BevGridSpec, Box3D, CameraModel, rotated_iou_bev
from .rng import generator, stream_key
from .scene import IMAGE_CHANNELS, N_CLASSES, Frame, PointCloud
from .tensor import ParamStore, Tensor

log = logging.getLogger(__name__)

LIDAR_CHANNELS = 6
CAMERA_CHANNELS = IMAGE_CHANNELS
REG_CHANNELS = 8
HEAD_WIDTH = 16


# ---------------------------------------------------------------- encoders


def pillarize(cloud: PointCloud, spec: BevGridSpec) -> np.ndarray:
    """Hand-crafted pillar features, shape (6, H, W).

    Channels: log(1 + count), mean z, max z, mean intensity, mean x and y
    offset from the cell centre (metres). Empty cells are exactly zero and
    out-of-range points are dropped.
    """
    out = np.zeros((LIDAR_CHANNELS, spec.H, spec.W))
    if len(cloud) == 0:
        return out
    r, c, inside = spec.cells_of(cloud.xyz[:, :2])
    if not inside.any():
        return out
    r, c = r[inside], c[inside]
    xyz = cloud.xyz[inside]
    inten = cloud.intensity[inside]
    idx = r * spec.W + c
    n_cells = spec.H * spec.W
    count = np.bincount(idx, minlength=n_cells).astype(np.float64)
    occupied = count > 0
    safe = np.where(occupied, count, 1.0)
    cx = spec.x_range[0] + (r + 0.5) * spec.cell_x
    cy = spec.y_range[0] + (c + 0.5) * spec.cell_y
    zmax = np.full(n_cells, -np.inf)
    np.maximum.at(zmax, idx, xyz[:, 2])
    chans = [
        np.log1p(count),
        np.bincount(idx, xyz[:, 2], n_cells) / safe,
        np.where(occupied, zmax, 0.0),
        np.bincount(idx, inten, n_cells) / safe,
        np.bincount(idx, xyz[:, 0] - cx, n_cells) / safe,
        np.bincount(idx, xyz[:, 1] - cy, n_cells) / safe,
    ]
    for i, ch in enumerate(chans):
        out[i] = np.where(occupied, ch, 0.0).reshape(spec.H, spec.W)
    return out


def lift_camera_to_bev(
    images: Sequence[np.ndarray], cameras: Sequence[CameraModel], spec: BevGridSpec, subsamples: int = 4
) -> np.ndarray:
    """Project the ground plane of every BEV cell into each camera and sample its semantic image.

    Each cell is sampled on a ``subsamples`` x ``subsamples`` lattice of
    ground points (nearest pixel each); a cell's feature is the mean over
    the lattice, invisible points counting as zero, so partially seen cells
    are weighted by the visible fraction. Overlapping cameras average per
    point. The projection uses whatever calibration is passed in, so a
    perturbed extrinsic displaces the lifted features.
    """
    C = images[0].shape[0] if len(images) else CAMERA_CHANNELS
    n = spec.H * spec.W
    k = subsamples * subsamples
    offs = (np.arange(subsamples) + 0.5) / subsamples - 0.5
    ox, oy = np.meshgrid(offs * spec.cell_x, offs * spec.cell_y, indexing="ij")
    xy = spec.cell_centers().reshape(n, 1, 2) + np.stack([ox.ravel(), oy.ravel()], axis=-1)[None]
    pts = np.c_[xy.reshape(-1, 2), np.zeros(n * k)]
    acc = np.zeros((C, n * k))
    hits = np.zeros(n * k)
    for img, cam in zip(images, cameras):
        uv, valid, _ = cam.project_points(pts)
        if not valid.any():
            continue
        u = np.floor(uv[valid, 0]).astype(np.int64)
        v = np.floor(uv[valid, 1]).astype(np.int64)
        acc[:, valid] += img[:, v, u]
        hits[valid] += 1.0
    per_point = acc / np.maximum(hits, 1.0)
    return per_point.reshape(C, n, k).mean(axis=2).reshape(C, spec.H, spec.W)


def extract_features(frame: Frame, spec: BevGridSpec) -> tuple[np.ndarray, np.ndarray]:
    return pillarize(frame.cloud, spec), lift_camera_to_bev(frame.images, frame.cameras, spec)


# ---------------------------------------------------------------- anchors and targets


@dataclass(frozen=True)
class Anchor:
    side: float = 3.0  # square footprint, metres
    height: float = 1.6
    z: float = 0.8

    @property
    def diagonal(self) -> float:
        return math.sqrt(2.0) * self.side

    @classmethod
    def from_boxes(cls, boxes: Sequence[Box3D]) -> "Anchor":
        if not boxes:
            return cls()
        side = float(np.median([math.sqrt(b.size[0] * b.size[1]) for b in boxes]))
        h = float(np.median([b.size[2] for b in boxes]))
        z = float(np.median([b.center[2] for b in boxes]))
        return cls(side, h, z)


def encode_box(box: Box3D, anchor_xy: tuple[float, float], anchor: Anchor) -> np.ndarray:
    d = anchor.diagonal
    return np.array(
        [
            (box.center[0] - anchor_xy[0]) / d,
            (box.center[1] - anchor_xy[1]) / d,
            (box.center[2] - anchor.z) / anchor.height,
            math.log(box.size[0] / anchor.side),
            math.log(box.size[1] / anchor.side),
            math.log(box.size[2] / anchor.height),
            math.sin(2.0 * box.yaw),
            math.cos(2.0 * box.yaw),
        ]
    )


def decode_box(reg: np.ndarray, anchor_xy: tuple[float, float], anchor: Anchor, class_id: int, score: float | None) -> Box3D:
    d = anchor.diagonal
    x = anchor_xy[0] + reg[0] * d
    y = anchor_xy[1] + reg[1] * d
    z = anchor.z + reg[2] * anchor.height
    sizes = np.exp(np.clip(reg[3:6], -5.0, 5.0)) * np.array([anchor.side, anchor.side, anchor.height])
    yaw = 0.5 * math.atan2(reg[6], reg[7])
    return Box3D((x, y, z), tuple(sizes), yaw, class_id, score)


@dataclass
class Targets:
    cls: np.ndarray  # (B, K, H, W) in {0, 1}
    reg: np.ndarray  # (B, 8, H, W)
    pos: np.ndarray  # (B, H, W) bool


def assign_targets(boxes_per_frame: Sequence[Sequence[Box3D]], spec: BevGridSpec, anchor: Anchor, n_classes: int = N_CLASSES) -> Targets:
    """Each box is assigned to the cell containing its centre; on a clash the box nearest the cell centre wins."""
    B = len(boxes_per_frame)
    cls = np.zeros((B, n_classes, spec.H, spec.W))
    reg = np.zeros((B, REG_CHANNELS, spec.H, spec.W))
    pos = np.zeros((B, spec.H, spec.W), dtype=bool)
    for b, boxes in enumerate(boxes_per_frame):
        best: dict[tuple[int, int], tuple[float, Box3D]] = {}
        for box in boxes:
            r, c, inside = spec.cells_of(np.array([box.center[:2]]))
            if not inside[0]:
                continue
            key = (int(r[0]), int(c[0]))
            ax, ay = spec.cell_center(*key)
            dist = math.hypot(box.center[0] - ax, box.center[1] - ay)
            if key not in best or dist < best[key][0]:
                best[key] = (dist, box)
        for (r, c), (_, box) in best.items():
            pos[b, r, c] = True
            cls[b, box.class_id, r, c] = 1.0
            reg[b, :, r, c] = encode_box(box, spec.cell_center(r, c), anchor)
    return Targets(cls, reg, pos)


# ---------------------------------------------------------------- losses


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Summed binary focal loss over every logit."""
    x = logits.data
    y = targets
    p = T._sigmoid(x)
    logp = _log_sigmoid(x)
    log1mp = _log_sigmoid(-x)
    pos_term = -alpha * (1.0 - p) ** gamma * logp
    neg_term = -(1.0 - alpha) * p**gamma * log1mp
    value = float(np.sum(np.where(y > 0.5, pos_term, neg_term)))

    def vjp(g):
        d_pos = alpha * (1.0 - p) ** gamma * (gamma * p * logp - (1.0 - p))
        d_neg = (1.0 - alpha) * p**gamma * (p - gamma * (1.0 - p) * log1mp)
        return (g * np.where(y > 0.5, d_pos, d_neg),)

    return T._result(np.array(value), (logits,), vjp)


def smooth_l1_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray, beta: float = 1.0 / 9.0) -> Tensor:
    """Summed smooth-L1 over the regression channels of the cells where ``mask`` is set."""
    m = mask[:, None, :, :].astype(np.float64)
    diff = (pred.data - target) * m
    a = np.abs(diff)
    quad = a < beta
    value = float(np.sum(np.where(quad, 0.5 * diff**2 / beta, a - 0.5 * beta)))

    def vjp(g):
        return (g * np.where(quad, diff / beta, np.sign(diff)) * m,)

    return T._result(np.array(value), (pred,), vjp)


@dataclass
class HeadOutput:
    cls: Tensor  # (B, K, H, W) logits
    reg: Tensor  # (B, 8, H, W)


def detection_loss(out: HeadOutput, targets: Targets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    n_pos = max(1, int(targets.pos.sum()))
    total = T.add(focal_loss(out.cls, targets.cls, alpha, gamma), smooth_l1_loss(out.reg, targets.reg, targets.pos))
    return T.scale(total, 1.0 / n_pos)


# ---------------------------------------------------------------- model


def build_head(store: ParamStore, in_channels: int, n_classes: int, rng: np.random.Generator, prior: float = 0.01) -> None:
    add_conv(store, "head.trunk1", in_channels, HEAD_WIDTH, 3, rng)
    add_bn(store, "head.trunk1.bn", HEAD_WIDTH)
    add_conv(store, "head.trunk2", HEAD_WIDTH, HEAD_WIDTH, 3, rng)
    add_bn(store, "head.trunk2.bn", HEAD_WIDTH)
    add_conv(store, "head.cls", HEAD_WIDTH, n_classes, 1, rng)
    store["head.cls.bias"].data[...] = -math.log((1.0 - prior) / prior)
    add_conv(store, "head.reg", HEAD_WIDTH, REG_CHANNELS, 1, rng)


def head_forward(fused: Tensor, store: ParamStore, training: bool) -> HeadOutput:
    expected = store["head.trunk1.weight"].shape[1]
    if fused.shape[1] != expected:
        raise T.DimensionError(f"head expects {expected} fused channels, got {fused.shape[1]}", axis="channels")
    h = conv_bn_relu(store, "head.trunk1", fused, training)
    h = conv_bn_relu(store, "head.trunk2", h, training)
    return HeadOutput(conv(store, "head.cls", h), conv(store, "head.reg", h))


def nms_rotated(boxes: Sequence[Box3D], iou_threshold: float) -> list[Box3D]:
    """Greedy rotated-BEV NMS, highest score first."""
    order = sorted(boxes, key=lambda b: -b.score)
    kept: list[Box3D] = []
    for b in order:
        if all(rotated_iou_bev(b, k) < iou_threshold for k in kept):
            kept.append(b)
    return kept


def decode(
    cls_logits: np.ndarray,
    reg: np.ndarray,
    spec: BevGridSpec,
    anchor: Anchor,
    score_threshold: float = 0.05,
    nms_iou: float = 0.2,
    max_per_class: int = 64,
) -> list[Box3D]:
    """Boxes for one frame from (K, H, W) logits and (8, H, W) regression."""
    scores = T._sigmoid(cls_logits)
    dets: list[Box3D] = []
    for k in range(scores.shape[0]):
        rs, cs = np.nonzero(scores[k] > score_threshold)
        if len(rs) == 0:
            continue
        sc = scores[k, rs, cs]
        top = np.argsort(-sc, kind="stable")[:max_per_class]
        cand = [
            decode_box(reg[:, rs[i], cs[i]], spec.cell_center(rs[i], cs[i]), anchor, k, float(sc[i]))
            for i in top
        ]
        dets.extend(nms_rotated(cand, nms_iou))
    return dets


@dataclass(frozen=True)
class DetectorConfig:
    grid: BevGridSpec = BevGridSpec()
    fusion: FusionConfig = FusionConfig()
    anchor: Anchor = Anchor()
    n_classes: int = N_CLASSES
    score_threshold: float = 0.05
    nms_iou: float = 0.2


class Detector:
    def __init__(self, variant: str, config: DetectorConfig = DetectorConfig(), seed: int = 0):
        self.config = config
        self.seed = seed
        self.fusion = FusionStep(variant, config.fusion, generator(seed, variant, "init/fusion"))
        self.store = ParamStore()
        self.store.merge(self.fusion.store)
        build_head(self.store, self.fusion.out_channels, config.n_classes, generator(seed, variant, "init/head"))
        self.training = True

    @property
    def variant(self) -> str:
        return self.fusion.variant

    def train(self) -> "Detector":
        self.training = True
        self.fusion.train()
        return self

    def eval(self) -> "Detector":
        self.training = False
        self.fusion.eval()
        return self

    def forward(self, lidar: np.ndarray | Tensor, camera: np.ndarray | Tensor) -> HeadOutput:
        fused = self.fusion(T.as_tensor(lidar), T.as_tensor(camera))
        return head_forward(fused, self.store, self.training)

    def predict(self, lidar: np.ndarray, camera: np.ndarray, batch_size: int = 16) -> list[list[Box3D]]:
        """Detections for a stack of frames' features (eval-mode batch norm)."""
        was_training = self.training
        self.eval()
        out: list[list[Box3D]] = []
        cfg = self.config
        try:
            for i in range(0, len(lidar), batch_size):
                ho = self.forward(lidar[i : i + batch_size], camera[i : i + batch_size])
                for b in range(ho.cls.shape[0]):
                    out.append(
                        decode(ho.cls.data[b], ho.reg.data[b], cfg.grid, cfg.anchor, cfg.score_threshold, cfg.nms_iou)
                    )
        finally:
            if was_training:
                self.train()
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return self.store.state_arrays()

    def save(self, path) -> None:
        T.save_checkpoint(path, self.state_arrays())

    def load(self, path) -> "Detector":
        T.load_into(self.store, T.load_checkpoint(path))
        return self


# ---------------------------------------------------------------- training


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSchedule:
    """Step-down schedule, optionally preceded by a constant-rate pretraining phase.

    ``epochs`` and ``lr_stages`` describe the fusion schedule proper; epoch
    numbers in ``lr_stages`` are relative to its start. ``pretrain_epochs``
    run first at ``pretrain_lr``.
    """

    epochs: int = 6
    lr_stages: tuple[tuple[int, float], ...] = ((1, 1e-3), (4, 1e-4), (6, 1e-5))
    batch_size: int = 4
    augment_last_epoch: bool = False
    augment_translation: float = 0.1
    augment_rotation: float = math.radians(1.0)
    pretrain_epochs: int = 0
    pretrain_lr: float = 3e-3

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.pretrain_epochs < 0:
            raise ValueError("epochs and batch_size must be >= 1, pretrain_epochs >= 0")
        stages = tuple((int(e), float(r)) for e, r in self.lr_stages)
        object.__setattr__(self, "lr_stages", stages)
        if not stages or stages[0][0] != 1:
            raise ValueError("the first lr stage must start at epoch 1")
        for (e0, r0), (e1, r1) in zip(stages, stages[1:]):
            if not (e1 > e0 and r1 < r0):
                raise ValueError("lr stages must increase in epoch and strictly decrease in rate")
        if stages[-1][0] > self.epochs:
            raise ValueError("an lr stage starts after the last epoch")

    @property
    def total_epochs(self) -> int:
        return self.pretrain_epochs + self.epochs

    def lr_for_epoch(self, epoch: int) -> float:
        """Learning rate of 1-based ``epoch`` counted over the whole run."""
        if epoch <= self.pretrain_epochs:
            return self.pretrain_lr
        epoch -= self.pretrain_epochs
        rate = self.lr_stages[0][1]
        for e, r in self.lr_stages:
            if epoch >= e:
                rate = r
        return rate

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_stages"] = [list(s) for s in self.lr_stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSchedule":
        d = dict(d)
        if "lr_stages" in d:
            d["lr_stages"] = tuple((int(e), float(r)) for e, r in d["lr_stages"])
        return cls(**d)


@dataclass(frozen=True)
class HistoryRecord:
    epoch: int
    step: int
    loss: float
    lr: float


@dataclass
class TrainResult:
    model: Detector
    history: list[HistoryRecord] = field(default_factory=list)

    def epoch_losses(self) -> dict[int, list[float]]:
        out: dict[int, list[float]] = {}
        for h in self.history:
            out.setdefault(h.epoch, []).append(h.loss)
        return out


def write_history(path, history: Sequence[HistoryRecord]) -> None:
    lines = ["epoch\tstep\tloss\tlr"] + [f"{h.epoch}\t{h.step}\t{h.loss!r}\t{h.lr!r}" for h in history]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_history(path) -> list[HistoryRecord]:
    rows = open(path).read().splitlines()[1:]
    return [HistoryRecord(int(e), int(s), float(l), float(r)) for e, s, l, r in (row.split("\t") for row in rows)]


def augmentation_seed(seed: int, epoch: int) -> int:
    return int(stream_key(seed, "augment", f"epoch{epoch}")[0])


def train(
    frames: Sequence[Frame],
    variant: str,
    schedule: TrainSchedule = TrainSchedule(),
    seed: int = 0,
    config: DetectorConfig | None = None,
    features: tuple[np.ndarray, np.ndarray] | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Mini-batch Adam training of a detector with the given fusion variant.

    When ``schedule.augment_last_epoch`` is set, the camera features of every
    frame in the final epoch are recomputed from misaligned calibrations.
    Precomputed clean ``features`` may be supplied to skip extraction.
    """
    if not frames:
        raise ValueError("training needs at least one frame")
    if config is None:
        config = DetectorConfig(anchor=Anchor.from_boxes([b for f in frames for b in f.boxes]))
    model = Detector(variant, config, seed).train()
    grid = config.grid
    if features is None:
        feats = [extract_features(f, grid) for f in frames]
        lidar = np.stack([a for a, _ in feats])
        camera = np.stack([b for _, b in feats])
    else:
        lidar, camera = features
    targets_all = assign_targets([f.boxes for f in frames], grid, config.anchor, config.n_classes)
    n = len(frames)
    history: list[HistoryRecord] = []
    step = 0
    last = schedule.total_epochs
    for epoch in range(1, last + 1):
        lr = schedule.lr_for_epoch(epoch)
        cam_epoch = camera
        if schedule.augment_last_epoch and epoch == last:
            spec = CorruptionSpec.misalign(
                schedule.augment_translation, schedule.augment_rotation, augmentation_seed(seed, epoch)
            )
            cam_epoch = np.stack(
                [lift_camera_to_bev(f.images, apply(f, spec).cameras, grid) for f in frames]
            )
        order = generator(seed, "train", f"epoch{epoch}").permutation(n)
        for i in range(0, n, schedule.batch_size):
            idx = np.sort(order[i : i + schedule.batch_size])
            tg = Targets(targets_all.cls[idx], targets_all.reg[idx], targets_all.pos[idx])
            model.store.zero_grad()
            out = model.forward(lidar[idx], cam_epoch[idx])
            loss = detection_loss(out, tg)
            value = float(loss.data)
            if not math.isfinite(value):
                recent = [h.loss for h in history[-5:]]
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step} (lr {lr:g}, variant {variant}, seed {seed}); "
                    f"recent losses {recent}"
                )
            T.backward(loss)
            T.adam_step(model.store, lr)
            history.append(HistoryRecord(epoch, step, value, lr))
            step += 1
            if max_steps is not None and step >= max_steps:
                return TrainResult(model.eval(), history)
        log.debug("epoch %d variant %s seed %d mean loss %.4f", epoch, variant, seed,
                  np.mean([h.loss for h in history if h.epoch == epoch]))
    return TrainResult(model.eval(), history)
