import numpy as np
import pytest
from dataclasses import replace

from pseudofuse.calib import project_points, rasterize_depth, unproject_pixel
from pseudofuse.depth import load_depth
from pseudofuse.boxes import load_boxes
from pseudofuse.calib import load_calibration
from pseudofuse.points import load_points
from pseudofuse.scene import SceneConfig, cast_rays, export_scene, generate_scene, load_ppm, ray_box, surface_distance


def test_same_seed_bit_identical():
    a, b = generate_scene(seed=5), generate_scene(seed=5)
    assert np.array_equal(a.raw_cloud.points, b.raw_cloud.points)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.boxes, b.boxes)
    assert not np.array_equal(a.boxes, generate_scene(seed=6).boxes)


def test_empty_scene_hits_ground_only():
    sc = generate_scene(SceneConfig(n_boxes=0))
    assert np.all(sc.raw_surface == -1)
    np.testing.assert_allclose(sc.raw_cloud.points[:, 2], -1.73, atol=1e-9)
    assert len(np.unique(sc.image.reshape(-1, 3), axis=0)) == 1


def test_single_box_ahead_face_depths():
    cfg = SceneConfig(n_boxes=1, box_x=(10.0, 10.0), box_y_fraction=0.0)
    sc = generate_scene(cfg, seed=3)
    box = sc.boxes[0]
    colors = np.unique(sc.image.reshape(-1, 3), axis=0)
    assert len(colors) == 2
    ground = np.all(sc.image == sc.image[-1, 0], axis=2)
    v, u = np.nonzero(~ground)
    assert len(u) > 0
    dirs = sc.calib.pixel_rays(u.astype(float), v.astype(float))
    t = ray_box(np.zeros_like(dirs), dirs, box)
    np.testing.assert_allclose(sc.gt_depth.depth[v, u], t, rtol=1e-12)


def test_raw_points_lie_on_surfaces(scene):
    assert np.max(scene.surface_distance(scene.raw_cloud.points)) < 1e-9


def test_gt_depth_lifts_onto_surfaces(scene):
    h, w = scene.gt_depth.depth.shape
    v, u = np.mgrid[0:h, 0:w]
    pts = unproject_pixel(u.ravel().astype(float), v.ravel().astype(float), scene.gt_depth.depth.ravel(), scene.calib)
    assert np.max(scene.surface_distance(pts)) < 1e-9


def test_lidar_and_camera_agree_on_depth(scene):
    proj = project_points(scene.raw_cloud.points, scene.calib)
    sparse = rasterize_depth(proj.uvd, scene.calib.width, scene.calib.height)
    exact = scene.depth_at(proj.uvd[:, 0], proj.uvd[:, 1])
    np.testing.assert_allclose(proj.uvd[:, 2], exact, rtol=1e-9)
    assert sparse.valid_count > 0


def test_boxes_rest_on_ground_and_do_not_overlap(scene):
    b = scene.boxes
    np.testing.assert_allclose(b[:, 2] - b[:, 5] / 2, -1.73)
    d = np.hypot(*(b[0, :2] - b[1, :2]))
    assert d > 0.5 * (np.hypot(*b[0, 3:5]) + np.hypot(*b[1, 3:5]))


def test_ray_misses_and_cast():
    box = np.array([5.0, 0, 0, 2, 2, 2, 0.0])
    dirs = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0]])
    t = ray_box(np.zeros((3, 3)), dirs, box)
    assert t[0] == 4.0 and np.isinf(t[1]) and np.isinf(t[2])
    _, surf = cast_rays(np.zeros((2, 3)), np.array([[1.0, 0, 0], [0, 0, 1.0]]), box[None], -1.73)
    assert surf.tolist() == [0, -2]


def test_surface_distance_inside_box():
    box = np.array([[0.0, 0, 0, 2, 2, 2, 0]])
    assert surface_distance(np.array([[0.0, 0, 0]]), box, -100.0)[0] == 1.0


def test_box_placement_failure():
    with pytest.raises(RuntimeError):
        generate_scene(SceneConfig(n_boxes=30, box_x=(6.0, 7.0), max_retries=50))


def test_camera_must_see_surfaces():
    with pytest.raises(ValueError):
        generate_scene(SceneConfig(camera_pitch_deg=0.0))


def test_noise_and_dropout_are_seeded():
    cfg = SceneConfig(depth_noise=0.02, dropout=0.3)
    a, b = generate_scene(cfg, 1), generate_scene(cfg, 1)
    assert np.array_equal(a.raw_cloud.points, b.raw_cloud.points)
    assert len(a.raw_cloud) < len(generate_scene(replace(cfg, dropout=0.0), 1).raw_cloud)


def test_export_roundtrip(tmp_path, scene):
    files = export_scene(scene, tmp_path)
    np.testing.assert_allclose(load_points(files["raw"])[:, :3], scene.raw_cloud.points, atol=1e-4, rtol=1e-6)
    np.testing.assert_allclose(load_ppm(files["image"]), scene.image, atol=1 / 255)
    depth, _ = load_depth(files["gt_depth"])
    np.testing.assert_allclose(depth, scene.gt_depth.depth, rtol=1e-6)
    np.testing.assert_array_equal(load_boxes(files["boxes"])[0], scene.boxes)
    np.testing.assert_array_equal(load_calibration(files["calib"]).R, scene.calib.R)
