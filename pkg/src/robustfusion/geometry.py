"""Rigid transforms, pinhole cameras, BEV binning and oriented-box overlap.

Reference frame: x forward, y left, z up, ground plane at z = 0.
Camera frame: x right, y down, z along the optical axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ORTHO_TOL = 1e-9


def rotation_from_rpy(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def rpy_from_rotation(R: np.ndarray) -> tuple[float, float, float]:
    pitch = math.asin(max(-1.0, min(1.0, -R[2, 0])))
    roll = math.atan2(R[2, 1], R[2, 2])
    yaw = math.atan2(R[1, 0], R[0, 0])
    return roll, pitch, yaw


def wrap_angle(a: float) -> float:
    """Wrap into (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("transform entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_rpy(cls, roll: float, pitch: float, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rotation_from_rpy(roll, pitch, yaw), np.asarray(translation, dtype=np.float64))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -(Rt @ self.translation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def rpy(self) -> tuple[float, float, float]:
        return rpy_from_rotation(self.rotation)

    def same_as(self, other: "RigidTransform") -> bool:
        return bool(np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation))


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera; ``extrinsic`` maps camera-frame points to the reference frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: RigidTransform = field(default_factory=RigidTransform)
    name: str = "cam"

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def with_extrinsic(self, extrinsic: RigidTransform) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height, extrinsic, self.name)

    def to_camera(self, points_ref: np.ndarray) -> np.ndarray:
        return self.extrinsic.inverse().apply(points_ref)

    def project_points(self, points_ref: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised projection: returns (uv (N, 2), in-view mask (N,), depth (N,))."""
        pc = self.to_camera(np.atleast_2d(points_ref))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[:, 0] / z + self.cx
            v = self.fy * pc[:, 1] / z + self.cy
        valid = (z > 0) & (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)
        return np.stack([u, v], axis=1), valid, z

    def unproject(self, u: float, v: float, depth: float) -> np.ndarray:
        pc = np.array([(u - self.cx) / self.fx * depth, (v - self.cy) / self.fy * depth, depth])
        return self.extrinsic.apply(pc)

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit ray directions (reference frame) through every pixel centre, shape (h*w, 3), plus origin."""
        vv, uu = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        d = np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)], axis=-1).reshape(-1, 3)
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        return d @ self.extrinsic.rotation.T, self.extrinsic.translation.copy()


def project_point(cam: CameraModel, p_ref) -> tuple[float, float] | None:
    uv, valid, _ = cam.project_points(np.asarray(p_ref, dtype=np.float64).reshape(1, 3))
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


@dataclass(frozen=True)
class Box3D:
    """Yaw-oriented box; a ``score`` marks a detection, ``None`` a ground truth."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]  # length (along heading), width, height
    yaw: float
    class_id: int = 0
    score: float | None = None

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        s = tuple(float(v) for v in self.size)
        if len(c) != 3 or len(s) != 3:
            raise ValueError("center and size need three components")
        if min(s) <= 0:
            raise ValueError(f"box size must be strictly positive, got {s}")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "class_id", int(self.class_id))
        if self.score is not None:
            object.__setattr__(self, "score", float(self.score))

    @property
    def is_ground_truth(self) -> bool:
        return self.score is None

    def with_score(self, score: float | None) -> "Box3D":
        return Box3D(self.center, self.size, self.yaw, self.class_id, score)

    def bev_corners(self) -> np.ndarray:
        """Ground-plane corners, counter-clockwise, shape (4, 2)."""
        l, w = self.size[0] / 2.0, self.size[1] / 2.0
        local = np.array([[l, w], [-l, w], [-l, -w], [l, -w]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return local @ np.array([[c, s], [-s, c]]) + np.array(self.center[:2])

    def corners(self) -> np.ndarray:
        """All eight corners, shape (8, 3): bottom face then top face."""
        bev = self.bev_corners()
        z0 = self.center[2] - self.size[2] / 2.0
        z1 = self.center[2] + self.size[2] / 2.0
        return np.vstack([np.c_[bev, np.full(4, z0)], np.c_[bev, np.full(4, z1)]])

    def z_range(self) -> tuple[float, float]:
        return self.center[2] - self.size[2] / 2.0, self.center[2] + self.size[2] / 2.0

    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]


@dataclass(frozen=True)
class BevGridSpec:
    """Square-celled BEV raster; rows index x, columns index y."""

    x_range: tuple[float, float] = (-16.0, 16.0)
    y_range: tuple[float, float] = (-16.0, 16.0)
    H: int = 32
    W: int = 32

    def __post_init__(self):
        if self.H % 2 or self.W % 2:
            raise ValueError("BEV grid dimensions must be even")
        for lo, hi in (self.x_range, self.y_range):
            if not (hi > 0 and abs(lo + hi) < 1e-12):
                raise ValueError("BEV ranges must be symmetric about the origin")

    @property
    def cell_x(self) -> float:
        return (self.x_range[1] - self.x_range[0]) / self.H

    @property
    def cell_y(self) -> float:
        return (self.y_range[1] - self.y_range[0]) / self.W

    def cells_of(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorised binning: (rows, cols, in-range mask)."""
        xy = np.atleast_2d(xy)
        x, y = xy[:, 0], xy[:, 1]
        inside = (x >= self.x_range[0]) & (x < self.x_range[1]) & (y >= self.y_range[0]) & (y < self.y_range[1])
        # float rounding just below an upper edge can land on index H
        r = np.minimum(np.floor((x - self.x_range[0]) / self.cell_x).astype(np.int64), self.H - 1)
        c = np.minimum(np.floor((y - self.y_range[0]) / self.cell_y).astype(np.int64), self.W - 1)
        return r, c, inside

    def cell_centers(self) -> np.ndarray:
        """(H, W, 2) array of cell-centre (x, y)."""
        xs = self.x_range[0] + (np.arange(self.H) + 0.5) * self.cell_x
        ys = self.y_range[0] + (np.arange(self.W) + 0.5) * self.cell_y
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)

    def cell_center(self, row: int, col: int) -> tuple[float, float]:
        return (
            self.x_range[0] + (row + 0.5) * self.cell_x,
            self.y_range[0] + (col + 0.5) * self.cell_y,
        )


def bev_cell_of(spec: BevGridSpec, p) -> tuple[int, int] | None:
    r, c, inside = spec.cells_of(np.asarray(p, dtype=np.float64)[:2].reshape(1, 2))
    if not inside[0]:
        return None
    return int(r[0]), int(c[0])


# ---------------------------------------------------------------- overlap


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def clip_polygon(subject: Sequence[Sequence[float]], clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of ``subject`` by the convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        m = len(inp)
        for j in range(m):
            px, py = inp[j]
            qx, qy = inp[(j + 1) % m]
            sp = ex * (py - ay) - ey * (px - ax)
            sq = ex * (qy - ay) - ey * (qx - ax)
            if sp >= 0:
                out.append((px, py))
                if sq < 0:
                    t = sp / (sp - sq)
                    out.append((px + t * (qx - px), py + t * (qy - py)))
            elif sq >= 0:
                t = sp / (sp - sq)
                out.append((px + t * (qx - px), py + t * (qy - py)))
    return np.array(out) if out else np.zeros((0, 2))


def _bev_params(b: Box3D) -> tuple:
    return b.center[0], b.center[1], b.size[0], b.size[1], b.yaw


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    ra = math.hypot(a.size[0], a.size[1]) / 2.0
    rb = math.hypot(b.size[0], b.size[1]) / 2.0
    if math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) >= ra + rb:
        return 0.0
    poly = clip_polygon(a.bev_corners(), b.bev_corners())
    return max(0.0, polygon_area(poly))


def rotated_iou_bev(a: Box3D, b: Box3D) -> float:
    if _bev_params(a) == _bev_params(b):
        return 1.0
    inter = bev_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter
    return float(min(1.0, max(0.0, inter / union)))


def iou_3d(a: Box3D, b: Box3D) -> float:
    if _bev_params(a) == _bev_params(b) and a.z_range() == b.z_range():
        return 1.0
    za0, za1 = a.z_range()
    zb0, zb1 = b.z_range()
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0.0:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    if inter <= 0.0:
        return 0.0
    union = a.volume() + b.volume() - inter
    return float(min(1.0, max(0.0, inter / union)))


def center_distance_2d(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1])


# ---------------------------------------------------------------- calibration files

CALIB_HEADER = "# robustfusion calibration v1"


def write_calibration(path: str | Path, cameras: Sequence[CameraModel]) -> None:
    """Write one block per camera.

    Each block is::

        camera <name>
        intrinsics <fx> <fy> <cx> <cy>
        image_size <width> <height>
        extrinsic_rpy <roll> <pitch> <yaw>      # radians, camera -> reference
        extrinsic_translation <x> <y> <z>       # metres
        end
    """
    lines = [CALIB_HEADER]
    for cam in cameras:
        r, p, y = cam.extrinsic.rpy()
        t = cam.extrinsic.translation
        lines += [
            f"camera {cam.name}",
            f"intrinsics {cam.fx!r} {cam.fy!r} {cam.cx!r} {cam.cy!r}",
            f"image_size {cam.width} {cam.height}",
            f"extrinsic_rpy {r!r} {p!r} {y!r}",
            f"extrinsic_translation {float(t[0])!r} {float(t[1])!r} {float(t[2])!r}",
            "end",
        ]
    Path(path).write_text("\n".join(lines) + "\n")


def read_calibration(path: str | Path) -> list[CameraModel]:
    cams: list[CameraModel] = []
    rec: dict[str, list[str]] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, *vals = line.split()
        if key == "end":
            fx, fy, cx, cy = map(float, rec["intrinsics"])
            w, h = map(int, rec["image_size"])
            ext = RigidTransform.from_rpy(*map(float, rec["extrinsic_rpy"]), translation=list(map(float, rec["extrinsic_translation"])))
            cams.append(CameraModel(fx, fy, cx, cy, w, h, ext, rec["camera"][0]))
            rec = {}
        else:
            rec[key] = vals
    if rec:
        raise ValueError(f"{path}: unterminated camera block")
    return cams
