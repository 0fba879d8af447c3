"""Train one toy detector, then evaluate it on the corruption ladder.

Takes about a minute on one core with the defaults.

    python3 demos/03_train_and_corrupt.py --variant conv_ed_se --frames 120
"""

import argparse
import math
import time

from robustfusion.corruption import CorruptionSpec, benchmark_ladder
from robustfusion.detector import Anchor, DetectorConfig, TrainSchedule, train
from robustfusion.fusion import FusionConfig
from robustfusion.geometry import BevGridSpec
from robustfusion.harness import stack_features
from robustfusion.metrics import delta_map, evaluate
from robustfusion.scene import N_CLASSES, make_frame

p = argparse.ArgumentParser()
p.add_argument("--variant", default="conv_se")
p.add_argument("--frames", type=int, default=120)
p.add_argument("--seed", type=int, default=0)
args = p.parse_args()

train_frames = [make_frame(args.seed, f"train-{i:05d}") for i in range(args.frames)]
eval_frames = [make_frame(args.seed, f"eval-{i:05d}") for i in range(args.frames // 3)]
grid = BevGridSpec()
anchor = Anchor.from_boxes([b for f in train_frames for b in f.boxes])
config = DetectorConfig(grid=grid, fusion=FusionConfig(fc_hidden=32), anchor=anchor, n_classes=N_CLASSES)

t0 = time.perf_counter()
schedule = TrainSchedule(pretrain_epochs=18)
result = train(train_frames, args.variant, schedule, args.seed, config)
losses = [r.loss for r in result.history]
print(f"trained {args.variant} for {schedule.total_epochs} epochs in {time.perf_counter() - t0:.0f}s, "
      f"loss {losses[0]:.3f} -> {losses[-1]:.3f}")

gts = [f.boxes for f in eval_frames]
base = None
print(f"\n{'corruption':16s} {'severity':10s} {'mAP':>6s} {'NDS-3':>6s} {'ΔmAP':>7s}")
for spec in [CorruptionSpec.none(), *benchmark_ladder()]:
    lidar, camera = stack_features(eval_frames, spec, grid)
    res = evaluate(result.model.predict(lidar, camera), gts, range(N_CLASSES), yaw_period=math.pi)
    base = res.map if base is None else base
    d = f"{delta_map(base, res.map):+6.1f}%" if base > 0 else "n/a"
    print(f"{spec.kind:16s} {spec.severity_label:10s} {100 * res.map:6.2f} {100 * res.nds:6.2f} {d:>7s}")
