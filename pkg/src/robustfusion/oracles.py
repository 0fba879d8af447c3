"""Slow, independent reference implementations used to cross-check the fast paths.

Each oracle shares no code with the function it checks beyond the basic
data types: brute-force loops, Monte Carlo sampling, quaternions.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .geometry import BevGridSpec, Box3D, CameraModel

# ---------------------------------------------------------------- rotations


def quat_mul(a, b):
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return (
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    )


def quat_rotation(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Rotation matrix of qz(yaw) * qy(pitch) * qx(roll)."""
    qx = (math.cos(roll / 2), math.sin(roll / 2), 0.0, 0.0)
    qy = (math.cos(pitch / 2), 0.0, math.sin(pitch / 2), 0.0)
    qz = (math.cos(yaw / 2), 0.0, 0.0, math.sin(yaw / 2))
    w, x, y, z = quat_mul(quat_mul(qz, qy), qx)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


# ---------------------------------------------------------------- overlap


def _inside_bev(box: Box3D, pts: np.ndarray) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dx = pts[:, 0] - box.center[0]
    dy = pts[:, 1] - box.center[1]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= box.size[0] / 2) & (np.abs(v) <= box.size[1] / 2)


def mc_bev_overlap(a: Box3D, b: Box3D, samples: int = 1_000_000, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo (intersection, union) area over a jittered grid covering both boxes."""
    rng = np.random.default_rng(seed)
    ra = 0.5 * math.hypot(a.size[0], a.size[1])
    rb = 0.5 * math.hypot(b.size[0], b.size[1])
    x0 = min(a.center[0] - ra, b.center[0] - rb)
    x1 = max(a.center[0] + ra, b.center[0] + rb)
    y0 = min(a.center[1] - ra, b.center[1] - rb)
    y1 = max(a.center[1] + ra, b.center[1] + rb)
    m = int(math.isqrt(samples))
    gx, gy = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    jit = rng.random((2, m, m))
    px = x0 + (gx + jit[0]).ravel() / m * (x1 - x0)
    py = y0 + (gy + jit[1]).ravel() / m * (y1 - y0)
    pts = np.stack([px, py], axis=1)
    ia, ib = _inside_bev(a, pts), _inside_bev(b, pts)
    cell = (x1 - x0) * (y1 - y0) / (m * m)
    return float(np.sum(ia & ib)) * cell, float(np.sum(ia | ib)) * cell


def mc_iou_bev(a: Box3D, b: Box3D, samples: int = 1_000_000, seed: int = 0) -> float:
    inter, union = mc_bev_overlap(a, b, samples, seed)
    return inter / union if union > 0 else 0.0


def mc_iou_3d(a: Box3D, b: Box3D, samples: int = 1_000_000, seed: int = 0) -> float:
    """Footprint intersection by Monte Carlo times the exact vertical overlap."""
    inter_bev, _ = mc_bev_overlap(a, b, samples, seed)
    za = (a.center[2] - a.size[2] / 2, a.center[2] + a.size[2] / 2)
    zb = (b.center[2] - b.size[2] / 2, b.center[2] + b.size[2] / 2)
    dz = max(0.0, min(za[1], zb[1]) - max(za[0], zb[0]))
    inter = inter_bev * dz
    va = a.size[0] * a.size[1] * a.size[2]
    vb = b.size[0] * b.size[1] * b.size[2]
    return inter / (va + vb - inter)


# ---------------------------------------------------------------- AP


def _greedy_tp(dets: Sequence[Box3D], gts: Sequence[Box3D], threshold: float) -> int:
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    used = set()
    tp = 0
    for i in order:
        d = dets[i]
        cands = []
        for j, g in enumerate(gts):
            if j in used or g.class_id != d.class_id:
                continue
            dist = math.sqrt((d.center[0] - g.center[0]) ** 2 + (d.center[1] - g.center[1]) ** 2)
            if dist <= threshold:
                cands.append((dist, j))
        if cands:
            used.add(min(cands)[1])
            tp += 1
    return tp


def brute_force_ap(
    det_frames: Sequence[Sequence[Box3D]], gt_frames: Sequence[Sequence[Box3D]], threshold: float
) -> float | None:
    """Enumerate every score threshold, re-match from scratch, integrate the envelope.

    Single class; distance-family matching. ``None`` when there is no ground truth.
    """
    n_gt = sum(len(g) for g in gt_frames)
    if n_gt == 0:
        return None
    scores = sorted({d.score for f in det_frames for d in f}, reverse=True)
    points = []
    for t in scores:
        tp = fp = 0
        for dets, gts in zip(det_frames, gt_frames):
            kept = [d for d in dets if d.score >= t]
            k = _greedy_tp(kept, gts, threshold)
            tp += k
            fp += len(kept) - k
        points.append((tp / n_gt, tp / (tp + fp)))
    ap, prev = 0.0, 0.0
    for r in sorted({r for r, _ in points}):
        p_max = max(p for rr, p in points if rr >= r)
        ap += (r - prev) * p_max
        prev = r
    return ap


# ---------------------------------------------------------------- features


def naive_pillarize(xyz: np.ndarray, intensity: np.ndarray, spec: BevGridSpec) -> np.ndarray:
    """Per-cell accumulation with plain Python loops."""
    H, W = spec.H, spec.W
    cx, cy = spec.cell_x, spec.cell_y
    cells: dict[tuple[int, int], list[int]] = {}
    for i in range(len(xyz)):
        x, y = xyz[i, 0], xyz[i, 1]
        if not (spec.x_range[0] <= x < spec.x_range[1] and spec.y_range[0] <= y < spec.y_range[1]):
            continue
        r = min(int(math.floor((x - spec.x_range[0]) / cx)), H - 1)
        c = min(int(math.floor((y - spec.y_range[0]) / cy)), W - 1)
        cells.setdefault((r, c), []).append(i)
    out = np.zeros((6, H, W))
    for (r, c), idx in cells.items():
        n = len(idx)
        ccx = spec.x_range[0] + (r + 0.5) * cx
        ccy = spec.y_range[0] + (c + 0.5) * cy
        out[0, r, c] = math.log(1 + n)
        out[1, r, c] = sum(xyz[i, 2] for i in idx) / n
        out[2, r, c] = max(xyz[i, 2] for i in idx)
        out[3, r, c] = sum(intensity[i] for i in idx) / n
        out[4, r, c] = sum(xyz[i, 0] - ccx for i in idx) / n
        out[5, r, c] = sum(xyz[i, 1] - ccy for i in idx) / n
    return out


def footprint_cells(box: Box3D, spec: BevGridSpec) -> set[tuple[int, int]]:
    """Cells whose centre lies inside the box footprint."""
    out = set()
    for r in range(spec.H):
        for c in range(spec.W):
            x, y = spec.cell_center(r, c)
            if _inside_bev(box, np.array([[x, y]]))[0]:
                out.add((r, c))
    return out


def foreground_centroid(bev: np.ndarray, spec: BevGridSpec) -> np.ndarray | None:
    """Mass centroid (x, y) of the non-background camera channels."""
    mass = bev[1:].sum(axis=0)
    total = mass.sum()
    if total <= 0:
        return None
    xs = spec.x_range[0] + (np.arange(spec.H) + 0.5) * spec.cell_x
    ys = spec.y_range[0] + (np.arange(spec.W) + 0.5) * spec.cell_y
    return np.array([(mass.sum(axis=1) * xs).sum() / total, (mass.sum(axis=0) * ys).sum() / total])


# ---------------------------------------------------------------- rendering


def _ray_hits_box(origin: np.ndarray, d: np.ndarray, box: Box3D) -> float:
    """Entry distance by per-axis interval intersection in the box frame, or inf."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rel = origin - np.asarray(box.center)
    o = (c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2])
    dd = (c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2])
    lo, hi = -math.inf, math.inf
    for k in range(3):
        h = box.size[k] / 2
        if abs(dd[k]) < 1e-15:
            if abs(o[k]) > h:
                return math.inf
            continue
        a, b = (-h - o[k]) / dd[k], (h - o[k]) / dd[k]
        lo, hi = max(lo, min(a, b)), min(hi, max(a, b))
    return lo if lo <= hi and lo > 0 else math.inf


def raytrace_labels(boxes: Sequence[Box3D], cam: CameraModel) -> np.ndarray:
    """Per-pixel class label (0 background, 1 + class) of the nearest box along the pixel ray."""
    out = np.zeros((cam.height, cam.width), dtype=np.int64)
    R = cam.extrinsic.rotation
    origin = cam.extrinsic.translation
    for v in range(cam.height):
        for u in range(cam.width):
            dc = np.array([(u + 0.5 - cam.cx) / cam.fx, (v + 0.5 - cam.cy) / cam.fy, 1.0])
            d = R @ dc
            best, label = math.inf, 0
            for b in boxes:
                t = _ray_hits_box(origin, d, b)
                if t < best:
                    best, label = t, 1 + b.class_id
            out[v, u] = label
    return out


# ---------------------------------------------------------------- losses


def naive_detection_loss(cls_logits, cls_targets, reg_pred, reg_targets, pos, alpha=0.25, gamma=2.0, beta=1.0 / 9.0):
    """Per-anchor scalar loop over focal + smooth-L1, normalised by positive count."""
    total = 0.0
    B, K, H, W = cls_logits.shape
    for b in range(B):
        for r in range(H):
            for c in range(W):
                for k in range(K):
                    x = float(cls_logits[b, k, r, c])
                    p = 1.0 / (1.0 + math.exp(-x))
                    if cls_targets[b, k, r, c] > 0.5:
                        total += -alpha * (1 - p) ** gamma * math.log(p)
                    else:
                        total += -(1 - alpha) * p**gamma * math.log(1 - p)
                if pos[b, r, c]:
                    for j in range(reg_pred.shape[1]):
                        a = abs(float(reg_pred[b, j, r, c] - reg_targets[b, j, r, c]))
                        total += 0.5 * a * a / beta if a < beta else a - 0.5 * beta
    return total / max(1, int(np.sum(pos)))


def centroid_shift(before: np.ndarray, after: np.ndarray, shift_xy, spec: BevGridSpec) -> np.ndarray | None:
    """Observed centroid displacement between two lifted camera maps.

    Lifted foreground smears toward the horizon and always crosses the grid
    edge, so both maps are cut to the same content: ``before`` to an inner
    cell-aligned window R, ``after`` to R moved by ``shift_xy`` with each
    cell weighted by its area overlap (cells are treated as uniform).
    """
    s = np.asarray(shift_xy, dtype=np.float64)[:2]
    mx = int(np.ceil(abs(s[0]) / spec.cell_x))
    my = int(np.ceil(abs(s[1]) / spec.cell_y))
    if 2 * mx >= spec.H or 2 * my >= spec.W:
        return None
    x_lo, x_hi = spec.x_range[0] + mx * spec.cell_x, spec.x_range[1] - mx * spec.cell_x
    y_lo, y_hi = spec.y_range[0] + my * spec.cell_y, spec.y_range[1] - my * spec.cell_y

    def overlap(edges_lo, size, lo, hi):
        return np.clip(np.minimum(edges_lo + size, hi) - np.maximum(edges_lo, lo), 0.0, None) / size

    xe = spec.x_range[0] + np.arange(spec.H) * spec.cell_x
    ye = spec.y_range[0] + np.arange(spec.W) * spec.cell_y
    w0 = np.outer(overlap(xe, spec.cell_x, x_lo, x_hi), overlap(ye, spec.cell_y, y_lo, y_hi))
    w1 = np.outer(overlap(xe, spec.cell_x, x_lo + s[0], x_hi + s[0]), overlap(ye, spec.cell_y, y_lo + s[1], y_hi + s[1]))
    c0 = foreground_centroid(before * w0, spec)
    c1 = foreground_centroid(after * w1, spec)
    if c0 is None or c1 is None:
        return None
    return c1 - c0
