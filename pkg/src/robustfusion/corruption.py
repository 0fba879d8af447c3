"""LiDAR layer removal, seeded point reduction and camera extrinsic misalignment."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import RigidTransform, rotation_from_rpy
from .rng import SampleRng
from .scene import Frame, PointCloud

KINDS = ("none", "layer_removal", "point_reduction", "misalignment")

_REQUIRED = {
    "none": set(),
    "layer_removal": {"layer_target"},
    "point_reduction": {"keep_ratio"},
    "misalignment": {"translation_limit", "rotation_limit"},
}
_OPTIONAL = {"layer_removal": {"layer_anchor"}}
_SEVERITY_FIELDS = ("layer_target", "keep_ratio", "translation_limit", "rotation_limit", "layer_anchor")


@dataclass(frozen=True)
class CorruptionSpec:
    """Declarative description of one corruption.

    ``layer_anchor`` optionally names a ring the kept layer set must contain;
    the harness uses it to make the 32 -> 16 -> 4 -> 1 ladder nested.
    """

    kind: str = "none"
    layer_target: int | None = None
    keep_ratio: float | None = None
    translation_limit: float | None = None  # metres
    rotation_limit: float | None = None  # radians
    global_seed: int = 0
    layer_anchor: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {KINDS}")
        present = {f for f in _SEVERITY_FIELDS if getattr(self, f) is not None}
        required = _REQUIRED[self.kind]
        allowed = required | _OPTIONAL.get(self.kind, set())
        if not required <= present:
            raise ValueError(f"{self.kind} needs fields {sorted(required - present)}")
        if present - allowed:
            raise ValueError(f"{self.kind} does not take fields {sorted(present - allowed)}")
        if self.layer_target is not None and self.layer_target < 1:
            raise ValueError("layer_target must be >= 1")
        if self.keep_ratio is not None and not (0.0 <= self.keep_ratio <= 1.0):
            raise ValueError("keep_ratio must lie in [0, 1]")
        for name in ("translation_limit", "rotation_limit"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def none(cls, global_seed: int = 0) -> "CorruptionSpec":
        return cls("none", global_seed=global_seed)

    @classmethod
    def layers(cls, target: int, global_seed: int = 0, anchor: int | None = None) -> "CorruptionSpec":
        return cls("layer_removal", layer_target=target, global_seed=global_seed, layer_anchor=anchor)

    @classmethod
    def points(cls, keep_ratio: float, global_seed: int = 0) -> "CorruptionSpec":
        return cls("point_reduction", keep_ratio=keep_ratio, global_seed=global_seed)

    @classmethod
    def misalign(cls, translation: float, rotation: float, global_seed: int = 0) -> "CorruptionSpec":
        return cls("misalignment", translation_limit=translation, rotation_limit=rotation, global_seed=global_seed)

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionSpec":
        return cls(**d)

    @property
    def severity_label(self) -> str:
        if self.kind == "layer_removal":
            return f"{self.layer_target} layers"
        if self.kind == "point_reduction":
            return f"{self.keep_ratio * 100:g}%"
        if self.kind == "misalignment":
            parts = []
            if self.translation_limit:
                parts.append(f"{self.translation_limit * 100:g}cm")
            if self.rotation_limit:
                parts.append(f"{math.degrees(self.rotation_limit):g}deg")
            return "+".join(parts) if parts else "0"
        return "none"

    def is_identity_for(self, source_layers: int) -> bool:
        if self.kind == "none":
            return True
        if self.kind == "layer_removal":
            return self.layer_target == source_layers
        if self.kind == "point_reduction":
            return self.keep_ratio == 1.0
        return self.translation_limit == 0 and self.rotation_limit == 0


# ---------------------------------------------------------------- layer removal


def kept_rings(source_layers: int, target: int, anchor: int | None = None) -> np.ndarray:
    """Ring indices retained when thinning ``source_layers`` down to ``target``.

    Uniform stride ``source/target`` starting at ``floor(stride/2)``, or at
    ``anchor mod stride`` when an anchor ring is given.
    """
    if not 1 <= target <= source_layers:
        raise ValueError(f"layer target {target} must lie in [1, {source_layers}]")
    stride = source_layers / target
    if anchor is None:
        offset = math.floor(stride / 2)
    else:
        offset = math.fmod(anchor, stride)
    return np.array([int(math.floor(offset + i * stride)) for i in range(target)], dtype=np.int64)


def ladder_anchor(source_layers: int, targets: Sequence[int]) -> int:
    """Anchor ring that makes the kept sets of a power-of-two ladder nest."""
    return int(kept_rings(source_layers, min(targets))[0])


def remove_layers(cloud: PointCloud, source_layers: int, target: int, anchor: int | None = None) -> PointCloud:
    if target > source_layers:
        raise ValueError(f"cannot keep {target} layers of a {source_layers}-layer sensor")
    if target == source_layers:
        return cloud
    keep = np.isin(cloud.ring, kept_rings(source_layers, target, anchor))
    return cloud.select(keep)


# ---------------------------------------------------------------- point reduction


def reduce_points(cloud: PointCloud, keep_ratio: float, rng: SampleRng) -> PointCloud:
    """Keep each point independently with probability ``keep_ratio``."""
    if not 0.0 <= keep_ratio <= 1.0:
        raise ValueError("keep_ratio must lie in [0, 1]")
    if keep_ratio == 1.0:
        return cloud
    keep = rng.random(len(cloud)) < keep_ratio
    return cloud.select(keep)


# ---------------------------------------------------------------- misalignment


def perturb_extrinsic(
    extrinsic: RigidTransform, translation_limit: float, rotation_limit: float, rng: SampleRng
) -> RigidTransform:
    """Right-compose uniform noise: ``extrinsic ∘ ΔT`` with ΔT expressed in the camera frame."""
    if translation_limit < 0 or rotation_limit < 0:
        raise ValueError("limits must be >= 0")
    if translation_limit == 0 and rotation_limit == 0:
        return extrinsic
    delta_t = rng.uniform(-translation_limit, translation_limit, size=3) if translation_limit > 0 else np.zeros(3)
    angles = rng.uniform(-rotation_limit, rotation_limit, size=3) if rotation_limit > 0 else np.zeros(3)
    delta = RigidTransform(rotation_from_rpy(*angles), delta_t)
    return extrinsic.compose(delta)


def misalignment_tag(index: int, camera_name: str) -> str:
    return f"misalignment/{index}:{camera_name}"


def apply(frame: Frame, spec: CorruptionSpec) -> Frame:
    """Return the corrupted frame; randomness is keyed by (seed, frame key, stage)."""
    if spec.kind == "none":
        return frame
    if spec.kind == "layer_removal":
        cloud = remove_layers(frame.cloud, frame.cloud.layer_count, spec.layer_target, spec.layer_anchor)
        return frame if cloud is frame.cloud else dataclasses.replace(frame, cloud=cloud)
    if spec.kind == "point_reduction":
        rng = SampleRng(spec.global_seed, frame.frame_key, "point_reduction")
        cloud = reduce_points(frame.cloud, spec.keep_ratio, rng)
        return frame if cloud is frame.cloud else dataclasses.replace(frame, cloud=cloud)
    if spec.translation_limit == 0 and spec.rotation_limit == 0:
        return frame
    cams = tuple(
        cam.with_extrinsic(
            perturb_extrinsic(
                cam.extrinsic,
                spec.translation_limit,
                spec.rotation_limit,
                SampleRng(spec.global_seed, frame.frame_key, misalignment_tag(i, cam.name)),
            )
        )
        for i, cam in enumerate(frame.cameras)
    )
    return dataclasses.replace(frame, cameras=cams)


def apply_all(frame: Frame, specs: Sequence[CorruptionSpec]) -> Frame:
    for s in specs:
        frame = apply(frame, s)
    return frame


def benchmark_ladder(source_layers: int = 32, global_seed: int = 0) -> list[CorruptionSpec]:
    """The severity ladders used in the benchmark tables."""
    targets = (16, 4, 1)
    anchor = ladder_anchor(source_layers, targets)
    specs = [CorruptionSpec.layers(t, global_seed, anchor) for t in targets]
    specs += [CorruptionSpec.points(r, global_seed) for r in (0.9, 0.8, 0.5)]
    one_deg = math.radians(1.0)
    specs += [
        CorruptionSpec.misalign(t, r, global_seed)
        for t, r in ((0.1, 0.0), (1.0, 0.0), (0.0, one_deg), (0.0, math.radians(3.0)), (0.1, one_deg))
    ]
    return specs
