"""Detection metrics: center-distance and IoU matched AP, mAP, TP errors, NDS, ΔmAP."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box3D, center_distance_2d, iou_3d, rotated_iou_bev, wrap_angle

DISTANCE_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
KITTI_CAR_IOU = 0.7
TP_THRESHOLD = 2.0
TP_METRICS = ("ATE", "ASE", "AOE")


@dataclass(frozen=True)
class MatchConfig:
    family: str = "center_distance"  # or "iou"
    thresholds: tuple[float, ...] = DISTANCE_THRESHOLDS
    iou_kind: str = "3d"  # "3d" or "bev", iou family only
    interpolation: str = "all"  # "all", "11" or "40"
    per_class: bool = True

    def __post_init__(self):
        if self.family not in ("center_distance", "iou"):
            raise ValueError(f"unknown match family {self.family!r}")
        th = tuple(float(t) for t in self.thresholds)
        if not th or any(t <= 0 for t in th) or list(th) != sorted(th):
            raise ValueError("thresholds must be positive and sorted ascending")
        if self.interpolation not in ("all", "11", "40"):
            raise ValueError("interpolation must be 'all', '11' or '40'")
        object.__setattr__(self, "thresholds", th)

    @classmethod
    def kitti(cls, iou: float = KITTI_CAR_IOU, iou_kind: str = "3d") -> "MatchConfig":
        return cls("iou", (iou,), iou_kind)


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]  # (det index, gt index)
    unmatched_dets: list[int]
    unmatched_gts: list[int]
    tp: np.ndarray  # per detection, in input order


def _score_order(dets: Sequence[Box3D]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match(
    detections: Sequence[Box3D],
    ground_truth: Sequence[Box3D],
    cfg: MatchConfig = MatchConfig(),
    threshold: float | None = None,
) -> MatchResult:
    """Greedy one-to-one matching in descending detection score.

    Distance family: the nearest unmatched same-class ground truth within
    ``threshold`` metres. IoU family: the highest-IoU one with IoU >= threshold.
    """
    th = cfg.thresholds[0] if threshold is None else threshold
    taken = [False] * len(ground_truth)
    tp = np.zeros(len(detections), dtype=bool)
    pairs = []
    for i in _score_order(detections):
        d = detections[i]
        best, best_val = -1, None
        for j, g in enumerate(ground_truth):
            if taken[j] or (cfg.per_class and g.class_id != d.class_id):
                continue
            if cfg.family == "center_distance":
                v = center_distance_2d(d, g)
                if v <= th and (best_val is None or v < best_val):
                    best, best_val = j, v
            else:
                v = iou_3d(d, g) if cfg.iou_kind == "3d" else rotated_iou_bev(d, g)
                if v >= th and (best_val is None or v > best_val):
                    best, best_val = j, v
        if best >= 0:
            taken[best] = True
            tp[i] = True
            pairs.append((i, best))
    matched_d = {p[0] for p in pairs}
    return MatchResult(
        pairs,
        [i for i in range(len(detections)) if i not in matched_d],
        [j for j in range(len(ground_truth)) if not taken[j]],
        tp,
    )


def _as_frames(x) -> list[list[Box3D]]:
    if len(x) == 0:
        return [[]]
    if isinstance(x[0], Box3D):
        return [list(x)]
    return [list(f) for f in x]


def pr_points(scores: np.ndarray, tp: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """(recall, precision) at every distinct score threshold, highest first."""
    if len(scores) == 0:
        return np.zeros(0), np.zeros(0)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    ctp = np.cumsum(tp[order])
    cfp = np.cumsum(~tp[order])
    # last index of each run of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    ctp, cfp = ctp[ends], cfp[ends]
    return ctp / n_gt, ctp / (ctp + cfp)


def ap_from_pr(recall: np.ndarray, precision: np.ndarray, interpolation: str = "all") -> float:
    if len(recall) == 0:
        return 0.0
    if interpolation == "all":
        env = np.maximum.accumulate(precision[::-1])[::-1]
        steps = np.diff(np.r_[0.0, recall])
        return float(np.sum(steps * env))
    levels = np.linspace(0.0, 1.0, 11) if interpolation == "11" else np.arange(1, 41) / 40.0
    total = 0.0
    for r in levels:
        sel = precision[recall >= r - 1e-12]
        total += float(sel.max()) if len(sel) else 0.0
    return total / len(levels)


def _class_arrays(det_frames, gt_frames, class_id, cfg, threshold):
    scores, flags, n_gt = [], [], 0
    errs = []
    for dets, gts in zip(det_frames, gt_frames):
        d = [b for b in dets if class_id is None or b.class_id == class_id]
        g = [b for b in gts if class_id is None or b.class_id == class_id]
        n_gt += len(g)
        if not d:
            continue
        m = match(d, g, cfg, threshold)
        scores.extend(b.score for b in d)
        flags.extend(m.tp.tolist())
        errs.extend((d[i], g[j]) for i, j in m.pairs)
    return np.asarray(scores, dtype=np.float64), np.asarray(flags, dtype=bool), n_gt, errs


def average_precision(
    detections,
    ground_truth,
    cfg: MatchConfig = MatchConfig(),
    threshold: float | None = None,
    class_id: int | None = None,
) -> float | None:
    """Area under the precision-recall curve; ``None`` when there is no ground truth.

    ``detections`` / ``ground_truth`` are either one frame's boxes or a list
    of per-frame lists. With ``class_id`` only that class is evaluated.
    """
    det_frames, gt_frames = _as_frames(detections), _as_frames(ground_truth)
    if len(det_frames) != len(gt_frames):
        raise ValueError("detections and ground truth cover different frame counts")
    th = cfg.thresholds[0] if threshold is None else threshold
    scores, tp, n_gt, _ = _class_arrays(det_frames, gt_frames, class_id, cfg, th)
    if n_gt == 0:
        return None
    r, p = pr_points(scores, tp, n_gt)
    return ap_from_pr(r, p, cfg.interpolation)


def mean_ap(per_class: Mapping[int, Mapping[float, float | None]] | Sequence) -> float:
    """Mean over thresholds, then over classes; undefined entries are skipped."""
    if not isinstance(per_class, Mapping):
        per_class = {0: {i: v for i, v in enumerate(per_class)}}
    class_means = []
    for table in per_class.values():
        vals = [v for v in table.values() if v is not None]
        if vals:
            class_means.append(sum(vals) / len(vals))
    if not class_means:
        raise ValueError("mean_ap: every AP is undefined")
    return sum(class_means) / len(class_means)


@dataclass(frozen=True)
class TpErrors:
    ate: float = 1.0
    ase: float = 1.0
    aoe: float = 1.0

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.ate, self.ase, self.aoe)


def aligned_iou(a: Box3D, b: Box3D) -> float:
    """IoU after aligning centres and yaw: per-axis min product over the union."""
    inter = float(np.prod(np.minimum(a.size, b.size)))
    return inter / (a.volume() + b.volume() - inter)


def yaw_difference(a: float, b: float, period: float = 2.0 * math.pi) -> float:
    d = abs(wrap_angle(a - b))
    if period < 2.0 * math.pi:
        d = d % period
        d = min(d, period - d)
    return d


def tp_errors(pairs: Sequence[tuple[Box3D, Box3D]], yaw_period: float = 2.0 * math.pi) -> TpErrors:
    """Mean translation, scale and orientation error over (detection, ground truth) pairs.

    An empty match set is fully penalised with 1 for every error.
    """
    if not pairs:
        return TpErrors()
    ate = [center_distance_2d(d, g) for d, g in pairs]
    ase = [1.0 - aligned_iou(d, g) for d, g in pairs]
    aoe = [yaw_difference(d.yaw, g.yaw, yaw_period) for d, g in pairs]
    return TpErrors(float(np.mean(ate)), float(np.mean(ase)), float(np.mean(aoe)))


def nds(map_value: float, errors: TpErrors | Sequence[float]) -> float:
    """``(5 mAP + sum(1 - min(1, err))) / (5 + m)`` over the m supplied TP errors."""
    errs = errors.as_tuple() if isinstance(errors, TpErrors) else tuple(errors)
    if not 0.0 <= map_value <= 1.0:
        raise ValueError("mAP must lie in [0, 1]")
    return (5.0 * map_value + sum(1.0 - min(1.0, e) for e in errs)) / (5.0 + len(errs))


def delta_map(baseline: float, corrupted: float) -> float:
    """Percentage change of mAP relative to the uncorrupted baseline."""
    if baseline <= 0:
        raise ZeroDivisionError("delta_map needs a positive baseline mAP")
    return 100.0 * (corrupted - baseline) / baseline


def report_delta(baseline: float, corrupted: float) -> float:
    return round(delta_map(baseline, corrupted), 1)


@dataclass
class EvalResult:
    map: float
    nds: float
    errors: TpErrors
    ap: dict[int, dict[float, float | None]] = field(default_factory=dict)
    nds_label: str = "NDS-3"


def evaluate(
    det_frames: Sequence[Sequence[Box3D]],
    gt_frames: Sequence[Sequence[Box3D]],
    class_ids: Sequence[int],
    cfg: MatchConfig = MatchConfig(),
    yaw_period: float = 2.0 * math.pi,
) -> EvalResult:
    """Dataset-level mAP, TP errors (per class at 2 m, then class mean) and NDS."""
    ap: dict[int, dict[float, float | None]] = {}
    class_errors = []
    for k in class_ids:
        ap[k] = {}
        for th in cfg.thresholds:
            scores, tp, n_gt, pairs = _class_arrays(det_frames, gt_frames, k, cfg, th)
            if n_gt == 0:
                ap[k][th] = None
                continue
            r, p = pr_points(scores, tp, n_gt)
            ap[k][th] = ap_from_pr(r, p, cfg.interpolation)
        if cfg.family == "center_distance" and any(v is not None for v in ap[k].values()):
            _, _, _, pairs = _class_arrays(det_frames, gt_frames, k, cfg, TP_THRESHOLD)
            class_errors.append(tp_errors(pairs, yaw_period))
    m = mean_ap(ap)
    if class_errors:
        errors = TpErrors(*(float(np.mean([getattr(e, f) for e in class_errors])) for f in ("ate", "ase", "aoe")))
    else:
        errors = TpErrors()
    return EvalResult(m, nds(m, errors), errors, ap)
