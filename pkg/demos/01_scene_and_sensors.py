"""A synthetic frame, its LiDAR rings and camera images, before and after corruption.

    python3 demos/01_scene_and_sensors.py --out demo-out
"""

import argparse
from pathlib import Path

import numpy as np
from matplotlib.figure import Figure

from robustfusion.corruption import CorruptionSpec, apply
from robustfusion.detector import lift_camera_to_bev
from robustfusion.geometry import BevGridSpec
from robustfusion.scene import make_frame

p = argparse.ArgumentParser()
p.add_argument("--seed", type=int, default=0)
p.add_argument("--out", type=Path, default=Path("demo-out"))
args = p.parse_args()
args.out.mkdir(parents=True, exist_ok=True)

frame = make_frame(args.seed, "demo-00000")
print(f"{len(frame.boxes)} boxes:")
for b in frame.boxes:
    print(f"  class {b.class_id}  centre ({b.center[0]:6.2f}, {b.center[1]:6.2f})  size {tuple(round(s, 2) for s in b.size)}  yaw {b.yaw:+.2f}")

cloud = frame.cloud
print(f"\n{len(cloud.xyz)} LiDAR returns over {cloud.layer_count} rings")

# thin the sensor and drop points; both keep a strict subset of the returns
for spec in (CorruptionSpec.layers(16), CorruptionSpec.layers(4), CorruptionSpec.points(0.5, global_seed=1)):
    thin = apply(frame, spec).cloud
    print(f"  {spec.kind:16s} {spec.severity_label:10s} -> {len(thin.xyz):6d} points, rings {sorted(set(thin.ring.tolist()))[:8]}...")

grid = BevGridSpec()
clean = lift_camera_to_bev(frame.images, frame.cameras, grid)
shifted = apply(frame, CorruptionSpec.misalign(1.0, 0.0, global_seed=3))
moved = lift_camera_to_bev(shifted.images, shifted.cameras, grid)
for a, b in zip(frame.cameras, shifted.cameras):
    d = b.extrinsic.translation - a.extrinsic.translation
    print(f"  {a.name}: extrinsic moved by {np.round(d, 3)} m")

fig = Figure(figsize=(12, 4))
ax = fig.add_subplot(1, 3, 1)
ax.scatter(cloud.xyz[:, 1], cloud.xyz[:, 0], s=0.3, c=cloud.intensity, cmap="viridis")
for b in frame.boxes:
    c = np.array(b.bev_corners())
    ax.plot(np.r_[c[:, 1], c[0, 1]], np.r_[c[:, 0], c[0, 0]], "r-", lw=1)
ax.set_xlim(16, -16); ax.set_ylim(-16, 16); ax.set_aspect("equal"); ax.set_title("LiDAR (x up, y left)")
for i, (bev, title) in enumerate(((clean, "camera BEV, calibrated"), (moved, "camera BEV, 1 m misalignment"))):
    ax = fig.add_subplot(1, 3, i + 2)
    # rows index x, columns index y; flip y so left is left
    ax.imshow(bev[1:].sum(axis=0), origin="lower", extent=(-16, 16, -16, 16))
    ax.set_xlim(16, -16)
    ax.set_title(title)
fig.tight_layout()
fig.savefig(args.out / "scene.png", dpi=120)
print(f"\nwrote {args.out / 'scene.png'}")
