"""Synthetic scenes, a raycast spinning LiDAR and semantic camera images."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import Box3D, CameraModel, RigidTransform, read_calibration, rotated_iou_bev, write_calibration
from .rng import generator

CLASS_NAMES = ("car", "truck", "cyclist")
N_CLASSES = len(CLASS_NAMES)
IMAGE_CHANNELS = 1 + N_CLASSES  # background first

BOX_HIT_INTENSITY = 1.0
GROUND_HIT_INTENSITY = 0.3


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    box_count: tuple[int, int] = (3, 8)
    extent: float = 15.0  # boxes lie fully inside [-extent, extent]^2
    ego_clearance: float = 3.0
    class_probs: tuple[float, ...] = (0.6, 0.2, 0.2)
    # per class: (length range, width range, height range)
    sizes: tuple = (
        ((3.8, 4.8), (1.7, 2.0), (1.4, 1.7)),
        ((6.0, 8.0), (2.3, 2.6), (2.6, 3.2)),
        ((1.6, 1.9), (0.6, 0.8), (1.5, 1.8)),
    )
    max_attempts: int = 2000

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "box_count" in d:
            d["box_count"] = tuple(d["box_count"])
        if "class_probs" in d:
            d["class_probs"] = tuple(d["class_probs"])
        if "sizes" in d:
            d["sizes"] = tuple(tuple(tuple(r) for r in c) for c in d["sizes"])
        return cls(**d)


@dataclass(frozen=True)
class Scene:
    frame_key: str
    boxes: tuple[Box3D, ...]
    extent: float


def generate_scene(global_seed: int, frame_key: str, config: SceneConfig = SceneConfig()) -> Scene:
    """Sample non-overlapping ground-truth boxes by rejection.

    Raises :class:`SceneGenerationError` when ``config.max_attempts`` draws
    cannot place the requested number of boxes.
    """
    rng = generator(global_seed, frame_key, "scene")
    lo, hi = config.box_count
    n = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    probs = np.asarray(config.class_probs, dtype=np.float64)
    probs = probs / probs.sum()
    boxes: list[Box3D] = []
    attempts = 0
    while len(boxes) < n:
        attempts += 1
        if attempts > config.max_attempts:
            raise SceneGenerationError(
                f"could not place {n} boxes in {config.max_attempts} attempts; lower box_count or enlarge extent"
            )
        k = int(rng.choice(len(probs), p=probs))
        (l0, l1), (w0, w1), (h0, h1) = config.sizes[k]
        l, w, h = rng.uniform(l0, l1), rng.uniform(w0, w1), rng.uniform(h0, h1)
        x, y = rng.uniform(-config.extent, config.extent, size=2)
        yaw = rng.uniform(-math.pi, math.pi)
        cand = Box3D((x, y, h / 2.0), (l, w, h), yaw, k)
        corners = cand.bev_corners()
        if np.any(np.abs(corners) > config.extent):
            continue
        if math.hypot(x, y) < config.ego_clearance + math.hypot(l, w) / 2.0:
            continue
        if any(rotated_iou_bev(cand, b) > 0.0 for b in boxes):
            continue
        boxes.append(cand)
    return Scene(frame_key, tuple(boxes), config.extent)


# ---------------------------------------------------------------- LiDAR


@dataclass(frozen=True, eq=False)
class LidarModel:
    elevations: np.ndarray  # radians, strictly increasing; index == ring
    azimuth_step: float = math.radians(0.6)
    max_range: float = 60.0
    mount: RigidTransform = field(default_factory=lambda: RigidTransform(np.eye(3), np.array([0.0, 0.0, 1.8])))

    def __post_init__(self):
        el = np.asarray(self.elevations, dtype=np.float64).reshape(-1)
        if el.size < 1 or np.any(np.diff(el) <= 0):
            raise ValueError("elevation angles must be strictly increasing")
        object.__setattr__(self, "elevations", el)

    @property
    def layer_count(self) -> int:
        return int(self.elevations.size)

    @classmethod
    def default(cls, layers: int = 32) -> "LidarModel":
        return cls(np.radians(np.linspace(-25.0, 5.0, layers)))

    def azimuths(self) -> np.ndarray:
        n = int(round(2.0 * math.pi / self.azimuth_step))
        return np.arange(n) * self.azimuth_step

    def ray_directions(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit directions in the reference frame (layer-major) and their ring indices."""
        el = self.elevations[:, None]
        az = self.azimuths()[None, :]
        d = np.stack(
            [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.broadcast_to(np.sin(el), (el.size, az.size))],
            axis=-1,
        ).reshape(-1, 3)
        ring = np.repeat(np.arange(self.layer_count), az.size)
        return d @ self.mount.rotation.T, ring


@dataclass(frozen=True, eq=False)
class PointCloud:
    xyz: np.ndarray  # (N, 3)
    intensity: np.ndarray  # (N,)
    ring: np.ndarray  # (N,) integer layer index
    layer_count: int

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        ring = np.asarray(self.ring, dtype=np.int64).reshape(-1)
        if not (len(xyz) == len(inten) == len(ring)):
            raise ValueError("point cloud field lengths differ")
        if len(ring) and (ring.min() < 0 or ring.max() >= self.layer_count):
            raise ValueError("ring index outside sensor layer count")
        if not np.all(np.isfinite(xyz)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "intensity", inten)
        object.__setattr__(self, "ring", ring)

    def __len__(self) -> int:
        return len(self.ring)

    def select(self, mask: np.ndarray) -> "PointCloud":
        return PointCloud(self.xyz[mask], self.intensity[mask], self.ring[mask], self.layer_count)

    def same_as(self, other: "PointCloud") -> bool:
        return (
            self.layer_count == other.layer_count
            and np.array_equal(self.xyz, other.xyz)
            and np.array_equal(self.intensity, other.intensity)
            and np.array_equal(self.ring, other.ring)
        )

    @classmethod
    def empty(cls, layer_count: int = 32) -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0, dtype=np.int64), layer_count)


def ray_box_distances(origin: np.ndarray, dirs: np.ndarray, box: Box3D) -> np.ndarray:
    """Entry distance of each ray into ``box`` (slab test in the box frame); inf on miss."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    Rt = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    o = Rt @ (origin - np.asarray(box.center))
    d = dirs @ Rt.T
    half = np.asarray(box.size) / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    t_lo = np.nan_to_num(np.minimum(t1, t2), nan=-np.inf)
    t_hi = np.nan_to_num(np.maximum(t1, t2), nan=np.inf)
    t_near = t_lo.max(axis=1)
    t_far = t_hi.min(axis=1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def raycast_lidar(scene: Scene, lidar: LidarModel) -> PointCloud:
    """First return of every (layer, azimuth) ray against boxes and the ground plane."""
    dirs, ring = lidar.ray_directions()
    origin = lidar.mount.translation
    with np.errstate(divide="ignore", invalid="ignore"):
        t_ground = np.where(dirs[:, 2] < 0, -origin[2] / dirs[:, 2], np.inf)
    t_box = np.full(len(dirs), np.inf)
    for box in scene.boxes:
        t_box = np.minimum(t_box, ray_box_distances(origin, dirs, box))
    t = np.minimum(t_ground, t_box)
    keep = t <= lidar.max_range
    t, d = t[keep], dirs[keep]
    xyz = origin + d * t[:, None]
    intensity = np.where(t_box[keep] <= t_ground[keep], BOX_HIT_INTENSITY, GROUND_HIT_INTENSITY)
    return PointCloud(xyz, intensity, ring[keep], lidar.layer_count)


# ---------------------------------------------------------------- cameras


_CAM_AXES = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])  # columns: cam x, y, z in ref


def mounted_camera(
    name: str,
    yaw: float,
    position=(0.5, 0.0, 1.6),
    pitch: float = math.radians(5.0),
    width: int = 160,
    height: int = 96,
    hfov: float = math.radians(120.0),
) -> CameraModel:
    """Level camera looking along ``yaw`` (radians about +z), tilted down by ``pitch``."""
    R = RigidTransform.from_rpy(0.0, pitch, yaw).rotation @ _CAM_AXES
    f = (width / 2.0) / math.tan(hfov / 2.0)
    return CameraModel(f, f, width / 2.0, height / 2.0, width, height, RigidTransform(R, np.asarray(position, float)), name)


def default_camera_rig() -> list[CameraModel]:
    return [
        mounted_camera("front_left", math.radians(55.0), position=(0.5, 0.3, 1.6)),
        mounted_camera("front_right", math.radians(-55.0), position=(0.5, -0.3, 1.6)),
    ]


def _convex_hull(pts: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns CCW hull vertices."""
    p = sorted(map(tuple, pts))
    if len(p) <= 2:
        return np.array(p)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for q in p:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], q) <= 0:
            lower.pop()
        lower.append(q)
    upper: list = []
    for q in reversed(p):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], q) <= 0:
            upper.pop()
        upper.append(q)
    return np.array(lower[:-1] + upper[:-1])


_BOX_EDGES = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)]
_NEAR = 1e-3


def _silhouette(cam: CameraModel, box: Box3D) -> np.ndarray | None:
    """Image-plane convex hull of ``box`` clipped to the near plane."""
    pc = cam.to_camera(box.corners())
    front = pc[:, 2] >= _NEAR
    if not front.any():
        return None
    verts = [pc[i] for i in range(8) if front[i]]
    for i, j in _BOX_EDGES:
        if front[i] != front[j]:
            t = (_NEAR - pc[i, 2]) / (pc[j, 2] - pc[i, 2])
            verts.append(pc[i] + t * (pc[j] - pc[i]))
    v = np.array(verts)
    uv = np.c_[cam.fx * v[:, 0] / v[:, 2] + cam.cx, cam.fy * v[:, 1] / v[:, 2] + cam.cy]
    hull = _convex_hull(uv)
    return hull if len(hull) >= 3 else None


def _fill_mask(hull: np.ndarray, width: int, height: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    u0 = max(0, int(math.floor(hull[:, 0].min())))
    u1 = min(width, int(math.ceil(hull[:, 0].max())) + 1)
    v0 = max(0, int(math.floor(hull[:, 1].min())))
    v1 = min(height, int(math.ceil(hull[:, 1].max())) + 1)
    if u0 >= u1 or v0 >= v1:
        return mask
    vv, uu = np.meshgrid(np.arange(v0, v1) + 0.5, np.arange(u0, u1) + 0.5, indexing="ij")
    inside = np.ones(uu.shape, dtype=bool)
    n = len(hull)
    for i in range(n):
        ax, ay = hull[i]
        bx, by = hull[(i + 1) % n]
        inside &= (bx - ax) * (vv - ay) - (by - ay) * (uu - ax) >= 0
    mask[v0:v1, u0:u1] = inside
    return mask


def render_semantic_image(scene: Scene, cam: CameraModel) -> np.ndarray:
    """One-hot class image (IMAGE_CHANNELS, h, w); nearer boxes overwrite farther ones."""
    labels = np.zeros((cam.height, cam.width), dtype=np.int64)
    cam_origin = cam.extrinsic.translation
    order = sorted(
        range(len(scene.boxes)),
        key=lambda i: -float(np.linalg.norm(np.asarray(scene.boxes[i].center) - cam_origin)),
    )
    for i in order:
        box = scene.boxes[i]
        hull = _silhouette(cam, box)
        if hull is None:
            continue
        labels[_fill_mask(hull, cam.width, cam.height)] = 1 + box.class_id
    img = np.zeros((IMAGE_CHANNELS, cam.height, cam.width))
    np.put_along_axis(img, labels[None], 1.0, axis=0)
    return img


# ---------------------------------------------------------------- frames and datasets


@dataclass(frozen=True, eq=False)
class Frame:
    frame_key: str
    scene: Scene
    cloud: PointCloud
    cameras: tuple[CameraModel, ...]
    images: tuple[np.ndarray, ...]

    @property
    def boxes(self) -> tuple[Box3D, ...]:
        return self.scene.boxes


def make_frame(
    global_seed: int,
    frame_key: str,
    scene_config: SceneConfig = SceneConfig(),
    lidar: LidarModel | None = None,
    cameras: Sequence[CameraModel] | None = None,
) -> Frame:
    lidar = lidar or LidarModel.default()
    cams = tuple(cameras) if cameras is not None else tuple(default_camera_rig())
    scene = generate_scene(global_seed, frame_key, scene_config)
    cloud = raycast_lidar(scene, lidar)
    images = tuple(render_semantic_image(scene, c) for c in cams)
    return Frame(frame_key, scene, cloud, cams, images)


def frame_keys(split: str, count: int) -> list[str]:
    return [f"{split}-{i:05d}" for i in range(count)]


POINT_DTYPE = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("intensity", "<f8"), ("ring", "<u2")])


def write_points(path: Path, cloud: PointCloud) -> None:
    """u64 count, then per point x, y, z, intensity as float64 and ring as u16."""
    rec = np.zeros(len(cloud), dtype=POINT_DTYPE)
    rec["x"], rec["y"], rec["z"] = cloud.xyz.T
    rec["intensity"] = cloud.intensity
    rec["ring"] = cloud.ring
    path.write_bytes(np.uint64(len(cloud)).astype("<u8").tobytes() + rec.tobytes())


def read_points(path: Path, layer_count: int) -> PointCloud:
    buf = path.read_bytes()
    n = int(np.frombuffer(buf, dtype="<u8", count=1)[0])
    rec = np.frombuffer(buf, dtype=POINT_DTYPE, count=n, offset=8)
    xyz = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
    return PointCloud(xyz, rec["intensity"].astype(np.float64), rec["ring"].astype(np.int64), layer_count)


def write_boxes(path: Path, boxes: Sequence[Box3D]) -> None:
    """One box per line: x y z length width height yaw class_id."""
    lines = [
        " ".join(repr(float(v)) for v in (*b.center, *b.size, b.yaw)) + f" {b.class_id}" for b in boxes
    ]
    path.write_text("".join(line + "\n" for line in lines))


def read_boxes(path: Path) -> tuple[Box3D, ...]:
    out = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        f = line.split()
        if len(f) != 8:
            raise ValueError(f"{path}: expected 8 fields per box, got {len(f)}")
        x, y, z, l, w, h, yaw = map(float, f[:7])
        out.append(Box3D((x, y, z), (l, w, h), yaw, int(f[7])))
    return tuple(out)


def write_frame(root: Path, frame: Frame) -> None:
    d = Path(root) / frame.frame_key
    d.mkdir(parents=True, exist_ok=True)
    write_points(d / "points.bin", frame.cloud)
    for cam, img in zip(frame.cameras, frame.images):
        (d / f"image_{cam.name}.bin").write_bytes(np.ascontiguousarray(img, dtype="<f8").tobytes())
    write_calibration(d / "calib.txt", frame.cameras)
    write_boxes(d / "boxes.txt", frame.boxes)


def read_frame(root: Path, frame_key: str, layer_count: int = 32, extent: float = 15.0) -> Frame:
    d = Path(root) / frame_key
    cams = tuple(read_calibration(d / "calib.txt"))
    images = []
    for cam in cams:
        raw = np.frombuffer((d / f"image_{cam.name}.bin").read_bytes(), dtype="<f8")
        images.append(raw.reshape(-1, cam.height, cam.width).astype(np.float64))
    boxes = read_boxes(d / "boxes.txt")
    cloud = read_points(d / "points.bin", layer_count)
    return Frame(frame_key, Scene(frame_key, boxes, extent), cloud, cams, tuple(images))


DATASET_MANIFEST = "dataset.json"


def write_dataset(root: str | Path, frames: Sequence[Frame], meta: dict) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for f in frames:
        write_frame(root, f)
    manifest = dict(meta)
    manifest["frames"] = [f.frame_key for f in frames]
    (root / DATASET_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_dataset(root: str | Path) -> tuple[list[Frame], dict]:
    root = Path(root)
    meta = json.loads((root / DATASET_MANIFEST).read_text())
    layers = int(meta.get("layer_count", 32))
    extent = float(meta.get("scene", {}).get("extent", 15.0))
    frames = [read_frame(root, k, layers, extent) for k in meta["frames"]]
    return frames, meta
