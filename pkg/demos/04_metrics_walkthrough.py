"""How the detection metrics behave on hand-built cases.

    python3 demos/04_metrics_walkthrough.py
"""

from robustfusion.geometry import Box3D, rotated_iou_bev
from robustfusion.metrics import MatchConfig, TpErrors, average_precision, delta_map, evaluate, nds
from robustfusion.oracles import brute_force_ap


def box(x, score=None, size=(1.0, 1.0, 1.0), yaw=0.0):
    return Box3D((x, 0.0, 0.0), size, yaw, 0, score)


gts = [box(0), box(10)]
dets = [box(0, 0.9), box(20, 0.8), box(10, 0.7)]
print("two objects, three detections: hit (0.9), miss (0.8), hit (0.7)")
print(f"  AP fast        {average_precision(dets, gts, threshold=0.5):.6f}")
print(f"  AP brute force {brute_force_ap([dets], [gts], 0.5):.6f}   (0.5 * 1 + 0.5 * 2/3)")

print("\ncentre-distance thresholds for a detection 1.5 m off:")
for th in (0.5, 1.0, 2.0, 4.0):
    print(f"  {th:3.1f} m -> AP {average_precision([box(1.5, 0.9)], [box(0)], threshold=th):.0f}")

print("\nrotated IoU: unit squares offset by half a side ->", rotated_iou_bev(box(0), box(0.5)))
car = (4.0, 2.0, 1.5)
print("KITTI-style 0.7 IoU for a car 0.2 m / 1.5 m off:",
      [average_precision([box(dx, 0.9, car)], [box(0, None, car)], MatchConfig.kitti()) for dx in (0.2, 1.5)])

res = evaluate([[box(0.5, 0.9, car, 0.1)]], [[box(0, None, car)]], [0])
print(f"\none slightly wrong detection: mAP {res.map:.3f}, ATE {res.errors.ate:.2f} m, "
      f"ASE {res.errors.ase:.2f}, AOE {res.errors.aoe:.2f} rad, NDS-3 {res.nds:.3f}")
print("saturated errors: five-term NDS", nds(0.8, (1.0,) * 5), "(mAP / 2), three-term NDS-3", nds(0.8, TpErrors(3.0, 1.0, 2.0)), "(5 mAP / 8)")
print(f"\nrelative drop 54.01 -> 47.52: {delta_map(54.01, 47.52):.1f}%")
