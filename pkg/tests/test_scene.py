import math

import numpy as np
import pytest

from robustfusion.geometry import Box3D, rotated_iou_bev
from robustfusion.oracles import raytrace_labels
from robustfusion.scene import (
    BOX_HIT_INTENSITY, GROUND_HIT_INTENSITY, LidarModel, Scene, SceneConfig, SceneGenerationError,
    generate_scene, make_frame, mounted_camera, raycast_lidar, read_dataset, render_semantic_image, write_dataset,
)

EMPTY = Scene("empty", (), 15.0)


class TestGenerateScene:
    def test_zero_boxes(self):
        assert generate_scene(0, "k", SceneConfig(box_count=(0, 0))).boxes == ()

    def test_deterministic(self):
        assert generate_scene(4, "frame-7").boxes == generate_scene(4, "frame-7").boxes
        assert generate_scene(4, "frame-7").boxes != generate_scene(4, "frame-8").boxes

    def test_non_overlap_over_500_scenes(self):
        cfg = SceneConfig()
        for i in range(500):
            s = generate_scene(2, f"sweep-{i}", cfg)
            assert cfg.box_count[0] <= len(s.boxes) <= cfg.box_count[1]
            for a in range(len(s.boxes)):
                assert np.all(np.abs(s.boxes[a].bev_corners()) <= cfg.extent)
                for b in range(a):
                    assert rotated_iou_bev(s.boxes[a], s.boxes[b]) < 0.05

    def test_budget_exhaustion_reports(self):
        cfg = SceneConfig(box_count=(40, 40), extent=6.0, max_attempts=200)
        with pytest.raises(SceneGenerationError, match="lower box_count"):
            generate_scene(0, "crowded", cfg)


class TestRaycast:
    def test_horizontal_layer_never_hits_flat_ground(self):
        cloud = raycast_lidar(EMPTY, LidarModel(np.array([0.0])))
        assert len(cloud) == 0

    def test_tilted_layer_hits_ground_at_expected_range(self):
        theta = math.radians(10.0)
        lidar = LidarModel(np.array([-theta]))
        cloud = raycast_lidar(EMPTY, lidar)
        h = lidar.mount.translation[2]
        horiz = np.hypot(cloud.xyz[:, 0], cloud.xyz[:, 1])
        assert len(cloud) == len(lidar.azimuths())
        np.testing.assert_allclose(horiz, h / math.tan(theta), rtol=0, atol=1e-9)
        assert np.all(np.abs(cloud.xyz[:, 2]) < 1e-9)
        assert np.all(cloud.intensity == GROUND_HIT_INTENSITY)

    def test_cube_front_face(self):
        lidar = LidarModel(np.array([0.0]))
        cube = Box3D((5.0, 0.0, lidar.mount.translation[2]), (1, 1, 1), 0.0)
        cloud = raycast_lidar(Scene("cube", (cube,), 15.0), lidar)
        ahead = np.argmin(np.abs(np.arctan2(cloud.xyz[:, 1], cloud.xyz[:, 0])))
        assert abs(cloud.xyz[ahead, 0] - 4.5) < 1e-12 and abs(cloud.xyz[ahead, 1]) < 1e-12
        assert cloud.intensity[ahead] == BOX_HIT_INTENSITY

    def test_rings_match_elevations(self, frames):
        lidar = LidarModel.default()
        for f in frames[:2]:
            rel = f.cloud.xyz - lidar.mount.translation
            el = np.arctan2(rel[:, 2], np.hypot(rel[:, 0], rel[:, 1]))
            assert np.max(np.abs(el - lidar.elevations[f.cloud.ring])) < 1e-6

    def test_fewer_layers_fewer_points(self, frames):
        full = LidarModel.default()
        half = LidarModel(full.elevations[::2])
        for f in frames[:3]:
            assert len(raycast_lidar(f.scene, half)) <= len(raycast_lidar(f.scene, full))

    def test_deterministic(self):
        a, b = make_frame(9, "det-1"), make_frame(9, "det-1")
        assert a.cloud.same_as(b.cloud)


class TestRender:
    cam = mounted_camera("front", 0.0, pitch=0.0, width=64, height=40)

    def test_empty_scene_is_background(self):
        img = render_semantic_image(EMPTY, self.cam)
        assert np.all(img[0] == 1.0) and np.all(img[1:] == 0.0)

    def test_box_behind_camera_is_background(self):
        scene = Scene("behind", (Box3D((-8.0, 0.0, 0.8), (4, 2, 1.6), 0.0),), 15.0)
        assert np.all(render_semantic_image(scene, self.cam)[0] == 1.0)

    def test_one_hot(self, frames):
        for img, _ in zip(frames[0].images, frames[0].cameras):
            np.testing.assert_array_equal(img.sum(axis=0), 1.0)

    def test_centered_box_matches_ray_test(self):
        box = Box3D((10.0, 0.0, 0.8), (4.2, 1.9, 1.6), 0.4, 1)
        scene = Scene("centred", (box,), 15.0)
        img = render_semantic_image(scene, self.cam)
        fg = int((img[0] == 0).sum())
        oracle = int((raytrace_labels(scene.boxes, self.cam) > 0).sum())
        assert fg > 0
        assert abs(fg - oracle) <= 0.02 * oracle
        assert img[2].sum() == fg

    def test_nearest_box_wins(self):
        near = Box3D((6.0, 0.0, 0.8), (1.0, 3.0, 1.6), 0.0, 0)
        far = Box3D((12.0, 0.0, 1.5), (1.0, 6.0, 3.0), 0.0, 1)
        img = render_semantic_image(Scene("occl", (far, near), 15.0), self.cam)
        v, u = self.cam.height // 2, self.cam.width // 2
        assert img[1, v, u] == 1.0


def test_dataset_round_trip(tmp_path, frames):
    write_dataset(tmp_path / "ds", frames[:2], {"layer_count": 32})
    back, meta = read_dataset(tmp_path / "ds")
    assert meta["frames"] == [f.frame_key for f in frames[:2]]
    for a, b in zip(frames, back):
        assert a.cloud.same_as(b.cloud)
        assert a.boxes == b.boxes
        for x, y in zip(a.images, b.images):
            assert np.array_equal(x, y)
        for x, y in zip(a.cameras, b.cameras):
            assert np.max(np.abs(x.extrinsic.matrix() - y.extrinsic.matrix())) < 1e-12


def test_box_file_has_eight_fields(tmp_path, frames):
    write_dataset(tmp_path / "ds", frames[:1], {})
    lines = (tmp_path / "ds" / frames[0].frame_key / "boxes.txt").read_text().splitlines()
    assert len(lines) == len(frames[0].boxes)
    assert all(len(line.split()) == 8 for line in lines)
