"""Gradient, oracle and determinism suites that gate a build."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .corruption import CorruptionSpec, apply, benchmark_ladder
from .detector import detection_loss, focal_loss, pillarize, smooth_l1_loss, HeadOutput, Targets, train, TrainSchedule
from .geometry import BevGridSpec, Box3D, iou_3d, rotated_iou_bev, rotation_from_rpy
from .gradcheck import GRAD_TOLERANCE, check_gradients, op_suite, variant_suite
from .metrics import average_precision, delta_map, nds
from .oracles import brute_force_ap, mc_iou_bev, naive_detection_loss, naive_pillarize, quat_rotation
from .rng import SampleRng
from .scene import make_frame


@dataclass
class Check:
    suite: str
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.suite}/{self.name}  {self.detail}".rstrip()


def _grad_checks() -> list[Check]:
    out = []
    for name, err in op_suite().items():
        out.append(Check("gradient", f"op:{name}", err < GRAD_TOLERANCE, f"max rel err {err:.2e}"))
    for name, err in variant_suite().items():
        out.append(Check("gradient", f"fusion:{name}", err < GRAD_TOLERANCE, f"max rel err {err:.2e}"))
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.normal(size=(2, 3, 4, 4)) * 2, requires_grad=True)
    y = (rng.random((2, 3, 4, 4)) < 0.2).astype(float)
    err = check_gradients(lambda: focal_loss(x, y), {"x": x})["x"]
    out.append(Check("gradient", "loss:focal", err < GRAD_TOLERANCE, f"max rel err {err:.2e}"))
    p = T.Tensor(rng.normal(size=(2, 8, 4, 4)) * 0.3, requires_grad=True)
    t = rng.normal(size=(2, 8, 4, 4)) * 0.3
    m = rng.random((2, 4, 4)) < 0.5
    err = check_gradients(lambda: smooth_l1_loss(p, t, m), {"p": p})["p"]
    out.append(Check("gradient", "loss:smooth_l1", err < GRAD_TOLERANCE, f"max rel err {err:.2e}"))
    return out


def random_boxes(rng: np.random.Generator, n: int, spread: float = 5.0, scored: bool = False) -> list[Box3D]:
    return [
        Box3D(
            (rng.uniform(-spread, spread), rng.uniform(-spread, spread), 0.0),
            (1.0, 1.0, 1.0),
            0.0,
            0,
            float(rng.choice([0.2, 0.5, 0.8, rng.random()])) if scored else None,
        )
        for _ in range(n)
    ]


def random_box_pair(rng: np.random.Generator) -> tuple[Box3D, Box3D]:
    def one():
        return Box3D(
            (rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0, 1)),
            (rng.uniform(0.5, 4), rng.uniform(0.5, 3), rng.uniform(0.5, 2)),
            rng.uniform(-math.pi, math.pi),
        )

    return one(), one()


def ap_oracle_gap(scenes: int = 100, seed: int = 0) -> float:
    """Largest |fast AP - brute-force AP| over random micro-scenes (<= 6 GT, <= 10 detections)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(scenes):
        gts = random_boxes(rng, int(rng.integers(1, 7)))
        dets = random_boxes(rng, int(rng.integers(0, 11)), scored=True)
        th = float(rng.choice([0.5, 1.0, 2.0, 4.0]))
        worst = max(worst, abs(average_precision(dets, gts, threshold=th) - brute_force_ap([dets], [gts], th)))
    return worst


def worked_example_ap() -> float:
    gts = [Box3D((0, 0, 0), (1, 1, 1), 0.0), Box3D((10, 0, 0), (1, 1, 1), 0.0)]
    dets = [
        Box3D((0, 0, 0), (1, 1, 1), 0.0, 0, 0.9),
        Box3D((20, 0, 0), (1, 1, 1), 0.0, 0, 0.8),
        Box3D((10, 0, 0), (1, 1, 1), 0.0, 0, 0.7),
    ]
    return average_precision(dets, gts, threshold=0.5)


def iou_oracle_gap(pairs: int = 1000, seed: int = 0, samples: int = 1_000_000) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(pairs):
        a, b = random_box_pair(rng)
        worst = max(worst, abs(rotated_iou_bev(a, b) - mc_iou_bev(a, b, samples, seed=i)))
    return worst


def _oracle_checks(iou_pairs: int) -> list[Check]:
    out = []
    gap = ap_oracle_gap()
    out.append(Check("oracle", "ap_brute_force", gap <= 1e-9, f"max gap {gap:.1e} over 100 scenes"))
    ap = worked_example_ap()
    out.append(Check("oracle", "ap_worked_example", abs(ap - 5.0 / 6.0) < 1e-12, f"AP {ap:.6f}"))
    gap = iou_oracle_gap(iou_pairs)
    out.append(Check("oracle", "iou_monte_carlo", gap <= 1e-3, f"max gap {gap:.1e} over {iou_pairs} pairs"))
    sq = rotated_iou_bev(Box3D((0, 0, 0), (1, 1, 1), 0.0), Box3D((0.5, 0, 0), (1, 1, 1), 0.0))
    out.append(Check("oracle", "iou_offset_squares", abs(sq - 1.0 / 3.0) < 1e-12, f"IoU {sq!r}"))
    same = Box3D((1, 2, 0.5), (4, 2, 1.5), 0.3)
    out.append(Check("oracle", "iou_identical", rotated_iou_bev(same, same) == 1.0 and iou_3d(same, same) == 1.0))
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        r, p, y = rng.uniform(-math.pi, math.pi, 3)
        worst = max(worst, float(np.abs(rotation_from_rpy(r, p, y) - quat_rotation(r, p, y)).max()))
    out.append(Check("oracle", "rpy_quaternion", worst < 1e-12, f"max entry gap {worst:.1e}"))
    frame = make_frame(0, "selftest-00000")
    grid = BevGridSpec()
    gap = float(np.abs(pillarize(frame.cloud, grid) - naive_pillarize(frame.cloud.xyz, frame.cloud.intensity, grid)).max())
    out.append(Check("oracle", "pillarize_naive", gap <= 1e-12, f"max gap {gap:.1e}"))
    logits = rng.normal(size=(1, 3, 4, 4))
    tcls = (rng.random((1, 3, 4, 4)) < 0.2).astype(float)
    reg, treg = rng.normal(size=(1, 8, 4, 4)), rng.normal(size=(1, 8, 4, 4))
    pos = rng.random((1, 4, 4)) < 0.3
    fast = float(detection_loss(HeadOutput(T.Tensor(logits), T.Tensor(reg)), Targets(tcls, treg, pos)).data)
    gap = abs(fast - naive_detection_loss(logits, tcls, reg, treg, pos))
    out.append(Check("oracle", "loss_naive", gap <= 1e-10, f"gap {gap:.1e}"))
    cases = [(1.0, (0.0,) * 5, 1.0), (0.0, (1.0,) * 5, 0.0), (0.5, (0.5,) * 5, 0.5)]
    ok = all(abs(nds(m, e) - want) <= 1e-12 for m, e, want in cases)
    out.append(Check("oracle", "nds_formula", ok))
    ok = round(delta_map(54.01, 47.52), 1) == -12.0 and round(delta_map(58.95, 42.40), 1) == -28.1
    out.append(Check("oracle", "delta_map_published", ok))
    return out


def _determinism_checks() -> list[Check]:
    out = []
    frames = [make_frame(3, f"selftest-{i:05d}") for i in range(2)]
    again = [make_frame(3, f"selftest-{i:05d}") for i in range(2)]
    out.append(Check("determinism", "scene_generation", all(a.cloud.same_as(b.cloud) for a, b in zip(frames, again))))
    ok = True
    for spec in benchmark_ladder(32, 7):
        for f in frames:
            a, b = apply(f, spec), apply(f, spec)
            ok &= a.cloud.same_as(b.cloud) and all(x.extrinsic.same_as(y.extrinsic) for x, y in zip(a.cameras, b.cameras))
    out.append(Check("determinism", "corruption_repeat", ok))
    ident = [CorruptionSpec.none(), CorruptionSpec.layers(32), CorruptionSpec.points(1.0), CorruptionSpec.misalign(0.0, 0.0)]
    out.append(Check("determinism", "identity_severities", all(apply(frames[0], s) is frames[0] for s in ident)))
    s1 = SampleRng(5, "k", "tag").random(8)
    s2 = SampleRng(5, "k", "tag").random(8)
    s3 = SampleRng(5, "k", "other").random(8)
    out.append(Check("determinism", "keyed_streams", bool(np.array_equal(s1, s2) and not np.array_equal(s1, s3))))
    sched = TrainSchedule(epochs=1, lr_stages=((1, 1e-3),), batch_size=2)
    m1 = train(frames, "conv_se", sched, seed=0, max_steps=2).model.state_arrays()
    m2 = train(frames, "conv_se", sched, seed=0, max_steps=2).model.state_arrays()
    out.append(Check("determinism", "training", all(np.array_equal(m1[k], m2[k]) for k in m1)))
    return out


def run_selftest(quick: bool = False, say: Callable[[str], None] | None = None) -> list[Check]:
    """Run every suite; ``quick`` probes fewer IoU pairs against the Monte Carlo oracle."""
    checks: list[Check] = []
    for suite in (_grad_checks, lambda: _oracle_checks(100 if quick else 300), _determinism_checks):
        t0 = time.perf_counter()
        got = suite()
        for c in got:
            if say:
                say(c.line())
        checks += got
        if say:
            say(f"({time.perf_counter() - t0:.1f}s)")
    return checks
