"""mAP values and printed ΔmAP entries of the LiDAR degradation tables.

Each block: (method, dataset, [(level, mAP, printed delta or None), ...]),
first entry the uncorrupted baseline. KITTI deltas are relative to mAP_3D.
"""

LAYER_AND_POINT_BLOCKS = [
    ("BEVFusion-Liang", "nuscenes", "layers", [(32, 54.01, None), (16, 47.52, -12.0), (4, 42.10, -22.1), (1, 15.23, -71.8)]),
    ("BEVFusion-Liang", "nuscenes", "points", [(100, 54.01, None), (90, 53.83, -0.3), (80, 53.58, -0.8), (50, 51.22, -5.2)]),
    ("TransFusion", "nuscenes", "layers", [(32, 58.95, None), (16, 42.40, -28.1), (4, 27.06, -54.1), (1, 2.22, -96.2)]),
    ("TransFusion", "nuscenes", "points", [(100, 58.95, None), (90, 58.48, -0.9), (80, 57.83, -1.8), (50, 53.79, -8.7)]),
    ("PointPillars", "nuscenes", "layers", [(32, 39.71, None), (16, 28.64, -27.9), (4, 15.61, -60.7), (1, 0.64, -98.4)]),
    ("PointPillars", "nuscenes", "points", [(100, 39.71, None), (90, 39.40, -0.8), (80, 39.03, -1.9), (50, 36.39, -8.8)]),
    ("MVX-Net", "kitti", "layers", [(64, 62.92, None), (16, 43.48, -30.9), (4, 6.04, -90.4), (1, 0.02, -99.9)]),
    ("MVX-Net", "kitti", "points", [(100, 62.92, None), (90, 62.37, -0.8), (80, 61.48, -2.3), (50, 56.38, -10.4)]),
    ("CLOCs", "kitti", "layers", [(64, 69.02, None), (16, 46.51, -32.6), (4, 8.04, -88.4), (1, 1.98, -97.1)]),
    ("CLOCs", "kitti", "points", [(100, 69.02, None), (90, 67.88, -1.7), (80, 66.96, -3.0), (50, 60.30, -12.6)]),
    ("PointPillars", "kitti", "layers", [(64, 64.36, None), (16, 47.96, -25.5), (4, 15.22, -76.4), (1, 0.90, -98.6)]),
    ("PointPillars", "kitti", "points", [(100, 64.36, None), (90, 63.63, -1.1), (80, 62.11, -3.5), (50, 55.73, -13.4)]),
]

# Printed entries that disagree with their own mAP columns by more than 0.1.
# (method, dataset, defect, level): recomputed value
INCONSISTENT_ENTRIES = {
    ("TransFusion", "nuscenes", "points", 90): -0.797,
    ("PointPillars", "nuscenes", "points", 80): -1.712,
    ("PointPillars", "nuscenes", "points", 50): -8.361,
}


def delta_entries():
    for method, dataset, defect, rows in LAYER_AND_POINT_BLOCKS:
        base = rows[0][1]
        for level, value, printed in rows[1:]:
            yield (method, dataset, defect, level), base, value, printed
