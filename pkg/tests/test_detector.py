import math

import numpy as np
import pytest

from robustfusion import tensor as T
from robustfusion.corruption import CorruptionSpec, apply
from robustfusion.detector import (
    REG_CHANNELS, Anchor, Detector, DetectorConfig, HeadOutput, Targets, TrainSchedule, assign_targets,
    decode, decode_box, detection_loss, encode_box, lift_camera_to_bev, nms_rotated, pillarize,
    read_history, train, write_history,
)
from robustfusion.geometry import BevGridSpec, Box3D, RigidTransform
from robustfusion.metrics import MatchConfig, evaluate
from robustfusion.oracles import centroid_shift, footprint_cells, naive_detection_loss, naive_pillarize
from robustfusion.scene import PointCloud, Scene, make_frame, mounted_camera, render_semantic_image

GRID = BevGridSpec()


class TestPillarize:
    def test_empty_cloud(self):
        assert np.all(pillarize(PointCloud.empty(), GRID) == 0.0)

    def test_single_point_at_cell_centre(self):
        x, y = GRID.cell_center(20, 7)
        f = pillarize(PointCloud([[x, y, 1.0]], [1.0], [0], 32), GRID)
        np.testing.assert_allclose(f[:, 20, 7], [math.log(2.0), 1.0, 1.0, 1.0, 0.0, 0.0], atol=1e-15)
        f[:, 20, 7] = 0.0
        assert np.all(f == 0.0)

    def test_matches_naive_oracle(self, frames, rng):
        xyz = np.c_[rng.uniform(-20, 20, (3000, 2)), rng.uniform(-1, 3, 3000)]
        cloud = PointCloud(xyz, rng.random(3000), rng.integers(0, 32, 3000), 32)
        for c in (cloud, frames[0].cloud):
            assert np.max(np.abs(pillarize(c, GRID) - naive_pillarize(c.xyz, c.intensity, GRID))) <= 1e-12

    def test_empty_cells_exactly_zero(self, frames):
        f = pillarize(frames[0].cloud, GRID)
        empty = f[0] == 0.0
        assert empty.any() and np.all(f[:, empty] == 0.0)


class TestLift:
    cam = mounted_camera("front", 0.0)

    def test_no_cameras(self):
        assert np.all(lift_camera_to_bev([], [], GRID) == 0.0)

    def test_box_ahead_lands_on_footprint(self):
        box = Box3D((8.0, 0.5, 0.8), (4.4, 1.9, 1.6), 0.2, 0)
        img = render_semantic_image(Scene("ahead", (box,), 15.0), self.cam)
        bev = lift_camera_to_bev([img], [self.cam], GRID)
        fg = {tuple(rc) for rc in np.argwhere(bev[1:].sum(axis=0) > 0)}
        for r, c in footprint_cells(box, GRID):
            assert any(abs(r - a) <= 1 and abs(c - b) <= 1 for a, b in fg)
        # nothing lands in front of the box
        near_edge = min(x for x, _ in box.bev_corners())
        assert all(GRID.cell_center(r, c)[0] >= near_edge - GRID.cell_x for r, c in fg)

    def test_zero_outside_frustum(self):
        img = np.zeros((4, self.cam.height, self.cam.width))
        img[0] = 1.0
        bev = lift_camera_to_bev([img], [self.cam], GRID)
        behind = GRID.cell_centers()[..., 0] < -1.0
        assert np.all(bev[:, behind] == 0.0)

    def test_centroid_shift_windows_edge_content(self):
        # a wedge running off the grid moved by exactly one cell
        bev = np.zeros((4, 32, 32))
        bev[1, 10:, 12:15] = 1.0
        moved = np.zeros_like(bev)
        moved[1, 11:, 12:15] = 1.0
        np.testing.assert_allclose(centroid_shift(bev, moved, (1.0, 0.0), GRID), [1.0, 0.0], atol=1e-12)
        assert centroid_shift(np.zeros((4, 32, 32)), moved, (1.0, 0.0), GRID) is None

    def test_translation_shifts_centroid(self):
        for i in range(5):
            f = make_frame(0, f"lift-{i:05d}")
            for cam, img in zip(f.cameras, f.images):
                delta = np.array([0.5, 0.0, 0.0])
                moved = cam.with_extrinsic(cam.extrinsic.compose(RigidTransform(np.eye(3), delta)))
                want = (cam.extrinsic.rotation @ delta)[:2]
                got = centroid_shift(
                    lift_camera_to_bev([img], [cam], GRID), lift_camera_to_bev([img], [moved], GRID), want, GRID
                )
                if got is not None:
                    assert np.linalg.norm(got - want) <= GRID.cell_x


class TestEncodeDecode:
    anchor = Anchor(3.0, 1.6, 0.8)

    def test_round_trip(self, rng):
        for _ in range(200):
            box = Box3D(
                (rng.uniform(-16, 16), rng.uniform(-16, 16), rng.uniform(0, 2)),
                tuple(rng.uniform(0.5, 8, 3)), rng.uniform(-math.pi, math.pi), 1,
            )
            axy = (rng.uniform(-16, 16), rng.uniform(-16, 16))
            back = decode_box(encode_box(box, axy, self.anchor), axy, self.anchor, 1, None)
            assert np.max(np.abs(np.subtract(back.center, box.center))) < 1e-6
            assert np.max(np.abs(np.subtract(back.size, box.size))) < 1e-6
            d = abs(back.yaw - box.yaw) % math.pi
            assert min(d, math.pi - d) < 1e-6

    def test_all_negative_logits_no_detections(self):
        assert decode(np.full((3, 32, 32), -50.0), np.zeros((8, 32, 32)), GRID, self.anchor) == []

    def test_single_hot_cell(self):
        logits = np.full((3, 32, 32), -50.0)
        logits[1, 10, 20] = 10.0
        reg = np.zeros((8, 32, 32))
        reg[7] = 1.0  # cos(2 yaw) = 1
        dets = decode(logits, reg, GRID, self.anchor)
        assert len(dets) == 1
        d = dets[0]
        assert d.center[:2] == GRID.cell_center(10, 20) and d.yaw == 0.0 and d.class_id == 1
        assert d.size == (3.0, 3.0, 1.6) and d.score == pytest.approx(1 / (1 + math.exp(-10)))

    def test_nms_keeps_higher_score(self):
        a = Box3D((0, 0, 0), (4, 2, 1.5), 0.3, 0, 0.6)
        b = Box3D((0, 0, 0), (4, 2, 1.5), 0.3, 0, 0.9)
        c = Box3D((9, 0, 0), (4, 2, 1.5), 0.3, 0, 0.1)
        kept = nms_rotated([a, b, c], 0.2)
        assert kept == [b, c]

    def test_targets_one_per_centre_cell(self, frames):
        tg = assign_targets([frames[0].boxes], GRID, self.anchor)
        assert tg.reg.shape == (1, REG_CHANNELS, 32, 32)
        assert tg.pos.sum() == len(frames[0].boxes) == tg.cls.sum()


class TestLoss:
    def _random(self, rng, pos_frac=0.3):
        logits = rng.normal(size=(2, 3, 6, 6))
        cls = (rng.random((2, 3, 6, 6)) < 0.2).astype(float)
        reg, treg = rng.normal(size=(2, 8, 6, 6)), rng.normal(size=(2, 8, 6, 6))
        pos = rng.random((2, 6, 6)) < pos_frac
        return logits, cls, reg, treg, pos

    def _loss(self, logits, cls, reg, treg, pos):
        return float(detection_loss(HeadOutput(T.Tensor(logits), T.Tensor(reg)), Targets(cls, treg, pos)).data)

    def test_no_targets_confident_negatives(self):
        z = np.zeros((1, 3, 4, 4))
        v = self._loss(np.full((1, 3, 4, 4), -12.0), z, np.zeros((1, 8, 4, 4)), np.zeros((1, 8, 4, 4)), np.zeros((1, 4, 4), bool))
        assert 0.0 <= v < 1e-3

    def test_larger_regression_error_costs_more(self, rng):
        logits, cls, _, treg, _ = self._random(rng)
        pos = np.zeros((2, 6, 6), bool)
        pos[0, 2, 3] = True
        reg = treg.copy()
        reg[0, 0, 2, 3] += 0.5
        small = self._loss(logits, cls, reg, treg, pos)
        reg[0, 0, 2, 3] += 0.5
        assert self._loss(logits, cls, reg, treg, pos) > small

    def test_matches_naive_oracle(self, rng):
        for _ in range(5):
            args = self._random(rng)
            assert abs(self._loss(*args) - naive_detection_loss(*args)) <= 1e-10

    def test_non_negative(self, rng):
        for _ in range(20):
            assert self._loss(*self._random(rng)) >= 0.0


class TestSchedule:
    def test_step_down(self):
        s = TrainSchedule()
        assert [s.lr_for_epoch(e) for e in range(1, 7)] == [1e-3, 1e-3, 1e-3, 1e-4, 1e-4, 1e-5]

    def test_pretraining_prefix(self):
        s = TrainSchedule(pretrain_epochs=2, pretrain_lr=5e-3)
        assert s.total_epochs == 8
        assert [s.lr_for_epoch(e) for e in (1, 2, 3, 6, 8)] == [5e-3, 5e-3, 1e-3, 1e-4, 1e-5]

    @pytest.mark.parametrize("stages", [((1, 1e-3), (4, 1e-3)), ((2, 1e-3),), ((1, 1e-3), (3, 1e-4), (2, 1e-5)), ((1, 1e-3), (9, 1e-4))])
    def test_invalid_stages(self, stages):
        with pytest.raises(ValueError):
            TrainSchedule(lr_stages=stages)

    def test_dict_round_trip(self):
        s = TrainSchedule(pretrain_epochs=3, augment_last_epoch=True)
        assert TrainSchedule.from_dict(s.to_dict()) == s


@pytest.fixture(scope="module")
def overfit(frames):
    sched = TrainSchedule(epochs=100, lr_stages=((1, 3e-3),), batch_size=3)
    return train(frames[:5], "conv_se", sched, seed=0, max_steps=200)


class TestTraining:
    def test_overfit_reduces_loss(self, overfit):
        h = overfit.history
        assert len(h) == 200
        assert np.mean([r.loss for r in h[-5:]]) < 0.1 * h[0].loss

    def test_trained_beats_untrained_on_train_set(self, overfit, frames):
        feats = [pillarize(f.cloud, GRID) for f in frames[:5]], [lift_camera_to_bev(f.images, f.cameras, GRID) for f in frames[:5]]
        lidar, cam = np.stack(feats[0]), np.stack(feats[1])
        gts = [list(f.boxes) for f in frames[:5]]
        untrained = Detector("conv_se", overfit.model.config, seed=0)

        def score(model):
            return evaluate(model.predict(lidar, cam), gts, range(3), MatchConfig(), math.pi).map

        assert score(overfit.model) > score(untrained)

    def test_bitwise_deterministic(self, frames):
        sched = TrainSchedule(epochs=1, lr_stages=((1, 1e-3),), batch_size=2)
        a = train(frames[:4], "conv_ed_se", sched, seed=3, max_steps=3)
        b = train(frames[:4], "conv_ed_se", sched, seed=3, max_steps=3)
        sa, sb = a.model.state_arrays(), b.model.state_arrays()
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)
        assert [r.loss for r in a.history] == [r.loss for r in b.history]

    def test_augmentation_only_changes_last_epoch(self, frames):
        base = TrainSchedule(epochs=2, lr_stages=((1, 1e-3), (2, 1e-4)), batch_size=2)
        aug = TrainSchedule(epochs=2, lr_stages=((1, 1e-3), (2, 1e-4)), batch_size=2, augment_last_epoch=True)
        h0 = train(frames[:4], "conv", base, seed=1).history
        h1 = train(frames[:4], "conv", aug, seed=1).history
        first = [r for r in h0 if r.epoch == 1]
        assert first == [r for r in h1 if r.epoch == 1]
        assert [r.loss for r in h0 if r.epoch == 2] != [r.loss for r in h1 if r.epoch == 2]

    def test_checkpoint_and_history_files(self, overfit, tmp_path, frames):
        overfit.model.save(tmp_path / "m.ckpt")
        fresh = Detector("conv_se", overfit.model.config, seed=9).load(tmp_path / "m.ckpt")
        sa, sb = overfit.model.state_arrays(), fresh.state_arrays()
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)
        write_history(tmp_path / "h.tsv", overfit.history)
        assert read_history(tmp_path / "h.tsv") == overfit.history

    def test_head_channel_mismatch(self, rng):
        det = Detector("concat", DetectorConfig(), 0)
        with pytest.raises(T.DimensionError):
            det.forward(rng.normal(size=(1, 6, 32, 32)), rng.normal(size=(1, 3, 32, 32)))

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train([], "conv")


def test_corrupted_camera_features_move(frames):
    f = frames[0]
    moved = apply(f, CorruptionSpec.misalign(1.0, 0.0, 3))
    assert not np.array_equal(lift_camera_to_bev(f.images, f.cameras, GRID), lift_camera_to_bev(moved.images, moved.cameras, GRID))
