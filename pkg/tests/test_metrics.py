import math

import numpy as np
import pytest

from published_tables import INCONSISTENT_ENTRIES, delta_entries
from robustfusion.geometry import Box3D
from robustfusion.metrics import (
    MatchConfig, TpErrors, average_precision, delta_map, evaluate, match, mean_ap, nds, pr_points,
    report_delta, tp_errors, yaw_difference,
)
from robustfusion.oracles import brute_force_ap
from robustfusion.selftest import ap_oracle_gap, random_boxes, worked_example_ap


def box(x, y=0.0, score=None, cls=0, size=(1.0, 1.0, 1.0), yaw=0.0, z=0.0):
    return Box3D((x, y, z), size, yaw, cls, score)


class TestMatch:
    def test_exact_hit_every_threshold(self):
        for th in (0.5, 1.0, 2.0, 4.0):
            assert match([box(0, score=0.5)], [box(0)], threshold=th).pairs == [(0, 0)]

    def test_threshold_semantics(self):
        got = {th: bool(match([box(1.5, score=0.5)], [box(0)], threshold=th).pairs) for th in (0.5, 1.0, 2.0, 4.0)}
        assert got == {0.5: False, 1.0: False, 2.0: True, 4.0: True}

    def test_higher_score_wins(self):
        m = match([box(0.1, score=0.3), box(0.9, score=0.8)], [box(0)], threshold=2.0)
        assert m.pairs == [(1, 0)] and m.unmatched_dets == [0]

    def test_each_gt_consumed_once(self, rng):
        for _ in range(50):
            dets, gts = random_boxes(rng, 8, scored=True), random_boxes(rng, 5)
            m = match(dets, gts, threshold=4.0)
            assert len({j for _, j in m.pairs}) == len(m.pairs) == int(m.tp.sum())

    def test_class_aware(self):
        assert match([box(0, score=0.9, cls=1)], [box(0, cls=0)]).pairs == []

    def test_iou_family_picks_highest_overlap(self):
        cfg = MatchConfig.kitti(0.1, "bev")
        m = match([box(0.0, score=0.9)], [box(0.6), box(0.2)], cfg)
        assert m.pairs == [(0, 1)]


class TestAveragePrecision:
    def test_perfect(self):
        gts = [box(0), box(5), box(10)]
        assert average_precision([box(g.center[0], score=0.5 + i / 10) for i, g in enumerate(gts)], gts) == 1.0

    def test_no_detections(self):
        assert average_precision([], [box(0)]) == 0.0

    def test_worked_example(self):
        assert worked_example_ap() == pytest.approx(5.0 / 6.0, abs=1e-12)
        assert worked_example_ap() == pytest.approx(0.5 * 1.0 + 0.5 * (2.0 / 3.0), abs=1e-15)

    def test_no_ground_truth_is_undefined(self):
        assert average_precision([box(0, score=0.5)], []) is None

    def test_oracle_equivalence(self):
        assert ap_oracle_gap(100, seed=0) <= 1e-9
        assert ap_oracle_gap(100, seed=7) <= 1e-9

    def test_rank_invariance(self, rng):
        for _ in range(30):
            gts = random_boxes(rng, 4)
            dets = random_boxes(rng, 9, scored=True)
            squashed = [Box3D(d.center, d.size, d.yaw, d.class_id, 1 / (1 + math.exp(-3 * d.score + 1))) for d in dets]
            assert average_precision(dets, gts, threshold=2.0) == pytest.approx(average_precision(squashed, gts, threshold=2.0), abs=1e-15)

    def test_low_false_positive_never_helps(self, rng):
        for _ in range(50):
            gts = random_boxes(rng, 4)
            dets = random_boxes(rng, 6, scored=True)
            before = average_precision(dets, gts, threshold=1.0)
            fp = box(100.0, score=min(d.score for d in dets) / 2)
            assert average_precision(dets + [fp], gts, threshold=1.0) <= before + 1e-15

    def test_top_perfect_match_never_hurts(self, rng):
        for _ in range(50):
            gts = random_boxes(rng, 4)
            dets = random_boxes(rng, 6, scored=True)
            before = average_precision(dets, gts, threshold=1.0)
            free = match(dets, gts, threshold=1.0).unmatched_gts
            if not free:
                continue
            # a ground truth nobody claimed, so the other matches stay put
            g = gts[free[0]]
            hit = Box3D(g.center, g.size, g.yaw, g.class_id, 1.0)
            assert average_precision(dets + [hit], gts, threshold=1.0) >= before - 1e-15

    def test_range(self, rng):
        for _ in range(50):
            ap = average_precision(random_boxes(rng, 8, scored=True), random_boxes(rng, 5), threshold=2.0)
            assert 0.0 <= ap <= 1.0

    def test_multi_frame_matches_oracle(self, rng):
        dets = [random_boxes(rng, 5, scored=True) for _ in range(4)]
        gts = [random_boxes(rng, 3) for _ in range(4)]
        assert average_precision(dets, gts, threshold=2.0) == pytest.approx(brute_force_ap(dets, gts, 2.0), abs=1e-12)

    def test_pr_curve_shape(self, rng):
        scores = rng.random(20)
        tp = rng.random(20) < 0.5
        r, p = pr_points(scores, tp, 15)
        assert np.all(np.diff(r) >= 0) and np.all((0 <= p) & (p <= 1)) and np.all(r <= 1)

    def test_eleven_point_interpolation(self):
        cfg = MatchConfig(interpolation="11")
        ap = average_precision([box(0, score=0.9), box(20, score=0.8), box(10, score=0.7)], [box(0), box(10)], cfg)
        # precision 1 up to recall 0.5 (6 levels), 2/3 above (5 levels)
        assert ap == pytest.approx((6 * 1.0 + 5 * 2 / 3) / 11, abs=1e-12)


class TestKitti:
    def test_iou_threshold(self):
        cfg = MatchConfig.kitti()
        g = box(0, size=(4, 2, 1.5))
        assert average_precision([box(0.2, score=0.9, size=(4, 2, 1.5))], [g], cfg) == 1.0
        assert average_precision([box(1.5, score=0.9, size=(4, 2, 1.5))], [g], cfg) == 0.0

    def test_bev_vs_3d(self):
        # same footprint, half the height overlapping
        g = box(0, size=(4, 2, 2.0), z=1.0)
        d = box(0, score=0.9, size=(4, 2, 2.0), z=2.0)
        assert average_precision([d], [g], MatchConfig.kitti(0.7, "bev")) == 1.0
        assert average_precision([d], [g], MatchConfig.kitti(0.7, "3d")) == 0.0

    @pytest.mark.parametrize("kw", [dict(family="mahalanobis"), dict(thresholds=()), dict(thresholds=(2.0, 1.0)),
                                    dict(thresholds=(0.0,)), dict(interpolation="101")])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            MatchConfig(**kw)


class TestMeanAp:
    def test_examples(self):
        assert mean_ap([1, 1, 1, 1]) == 1.0
        assert mean_ap([0.2, 0.4, 0.6, 0.8]) == pytest.approx(0.5, abs=1e-15)
        assert mean_ap({0: {2.0: 0.5}, 1: {2.0: 0.7}}) == pytest.approx(0.6, abs=1e-15)

    def test_undefined_skipped(self):
        assert mean_ap({0: {1.0: 0.4, 2.0: None}, 1: {1.0: None}}) == pytest.approx(0.4)

    def test_all_undefined(self):
        with pytest.raises(ValueError):
            mean_ap({0: {1.0: None}})


class TestTpErrors:
    def test_perfect(self):
        assert tp_errors([(box(1, 2), box(1, 2))]).as_tuple() == (0.0, 0.0, 0.0)

    def test_offset(self):
        e = tp_errors([(box(0.5), box(0))])
        assert (e.ate, e.ase, e.aoe) == (0.5, 0.0, 0.0)

    def test_scale(self):
        e = tp_errors([(box(0, size=(4, 2, 3)), box(0, size=(4, 2, 1.5)))])
        assert e.ase == pytest.approx(0.5, abs=1e-15)

    def test_empty_fully_penalised(self):
        assert tp_errors([]) == TpErrors(1.0, 1.0, 1.0)

    def test_yaw_wraps(self):
        e = tp_errors([(box(0, yaw=math.pi - 0.1), box(0, yaw=-math.pi + 0.1))])
        assert e.aoe == pytest.approx(0.2, abs=1e-12)
        assert yaw_difference(0.1, math.pi + 0.1, period=math.pi) == pytest.approx(0.0, abs=1e-12)

    def test_ranges(self, rng):
        for _ in range(100):
            a = Box3D(tuple(rng.normal(size=3)), tuple(rng.uniform(0.5, 4, 3)), rng.uniform(-4, 4))
            b = Box3D(tuple(rng.normal(size=3)), tuple(rng.uniform(0.5, 4, 3)), rng.uniform(-4, 4))
            e = tp_errors([(a, b)])
            assert e.ate >= 0 and 0 <= e.ase <= 1 and 0 <= e.aoe <= math.pi


class TestNds:
    def test_cases(self):
        assert abs(nds(1.0, (0.0,) * 5) - 1.0) <= 1e-12
        assert abs(nds(0.0, (1.0, 2.0, 1.0, 5.0, 1.0)) - 0.0) <= 1e-12
        assert abs(nds(0.5, (0.5,) * 5) - 0.5) <= 1e-12

    def test_saturated_errors_halve_map(self, rng):
        for m in rng.random(20):
            assert nds(m, (1.0, 3.0, 1.5, 2.0, 9.0)) == 5 * m / 10

    def test_three_error_form(self):
        assert nds(0.6, TpErrors(0.2, 0.1, 0.3)) == pytest.approx((3.0 + 0.8 + 0.9 + 0.7) / 8, abs=1e-15)

    def test_invalid_map(self):
        with pytest.raises(ValueError):
            nds(1.2, TpErrors())


class TestDeltaMap:
    def test_examples(self):
        assert report_delta(54.01, 47.52) == -12.0
        assert report_delta(58.95, 42.40) == -28.1
        assert delta_map(37.0, 37.0) == 0.0

    def test_zero_baseline(self):
        with pytest.raises(ZeroDivisionError):
            delta_map(0.0, 0.3)

    @pytest.mark.parametrize("key,base,value,printed", list(delta_entries()), ids=lambda v: str(v) if isinstance(v, tuple) else None)
    def test_published_columns(self, key, base, value, printed):
        d = delta_map(base, value)
        if key in INCONSISTENT_ENTRIES:
            # the printed figure disagrees with its own mAP columns
            assert d == pytest.approx(INCONSISTENT_ENTRIES[key], abs=5e-4)
            assert abs(d - printed) > 0.1
        else:
            assert abs(d - printed) <= 0.1


class TestEvaluate:
    def test_perfect_scene(self):
        gts = [[box(0, size=(4, 2, 1.5)), box(8, cls=1)]]
        dets = [[Box3D(g.center, g.size, g.yaw, g.class_id, 0.9) for g in gts[0]]]
        res = evaluate(dets, gts, range(3))
        assert res.map == 1.0 and res.errors.as_tuple() == (0.0, 0.0, 0.0) and res.nds == 1.0
        assert res.ap[2] == {0.5: None, 1.0: None, 2.0: None, 4.0: None}

    def test_offset_detection(self):
        res = evaluate([[box(1.5, score=0.9)]], [[box(0)]], [0])
        assert res.map == pytest.approx(0.5) and res.errors.ate == pytest.approx(1.5)
        assert res.nds_label == "NDS-3"

    def test_missing_everything(self):
        res = evaluate([[]], [[box(0)]], [0])
        assert res.map == 0.0 and res.errors == TpErrors() and res.nds == 0.0
