import math

import numpy as np
import pytest
from PIL import Image

from neartofar.dataset import Sequence
from neartofar.errors import ConfigError
from neartofar.geometry import CameraIntrinsics, backproject_image
from neartofar.labels import FREE, OBSTACLE, UNKNOWN, generate_labels
from neartofar.plane import RansacConfig, fit_plane_ransac
from neartofar.synth import (
    Appearance, Box, DepthModel, SceneSpec, depth_to_png_array, export_sequence, look_pose, make_base_sequence,
    make_shift_sequence, render_frame,
)

K = CameraIntrinsics(fx=100.0, fy=100.0, cx=79.5, cy=59.5, width=160, height=120)
CLEAN = DepthModel(15.0, 0.0, 0.0)


def test_look_pose_axes():
    pose = look_pose((0, 0, 1), 0.0, 0.0)
    np.testing.assert_allclose(pose.R @ [0, 0, 1], [1, 0, 0], atol=1e-12)   # optical axis -> world +x
    np.testing.assert_allclose(pose.R @ [0, 1, 0], [0, 0, -1], atol=1e-12)  # image down -> world down
    np.testing.assert_allclose(pose.up_in_camera(), [0, -1, 0], atol=1e-12)


def test_45_degree_camera_centre_depth():
    k = CameraIntrinsics(fx=10.0, fy=10.0, cx=2.0, cy=2.0, width=5, height=5)
    spec = SceneSpec(k, [look_pose((0, 0, 1.0), 0.0, 45.0)], depth_model=CLEAN)
    f = render_frame(spec, 0)
    # the optical axis hits the ground sqrt(2) m away along itself
    assert f.true_depth[2, 2] == pytest.approx(math.sqrt(2), abs=1e-12)
    assert f.depth[2, 2] == pytest.approx(math.sqrt(2), abs=1e-12)


def test_far_ground_is_invalid_depth_but_free_gt():
    # level camera 1.5 m up: row v sees the ground at z = 1.5 * fy / (v - cy)
    spec = SceneSpec(K, [look_pose((0, 0, 1.5), 0.0, 0.0)], depth_model=CLEAN)
    f = render_frame(spec, 0)
    v = int(math.ceil(59.5 + 150.0 / 30.0))     # first row closer than 30 m
    assert f.true_depth[v, 80] == pytest.approx(1.5 * 100 / (v - 59.5))
    far_row = 61                                 # 1.5 * 100 / 1.5 = 100 m
    assert f.depth[far_row, 80] == 0.0
    assert f.gt[far_row, 80] == FREE
    assert np.all(f.gt[:59] == UNKNOWN)          # sky above the horizon


def test_box_pixels_are_obstacle():
    box = Box((6.0, 0.0, 1.0), (1.0, 2.0, 2.0))
    spec = SceneSpec(K, [look_pose((0, 0, 1.5), 0.0, 0.0)], [box], depth_model=CLEAN)
    f = render_frame(spec, 0)
    # centre pixel looks straight at the front face at x = 5.5
    assert f.gt[60, 80] == OBSTACLE
    assert f.true_depth[60, 80] == pytest.approx(5.5)
    assert np.all(f.gt[f.hit_id > 0] == OBSTACLE)


def test_spawn_frame_hides_box():
    box = Box((6.0, 0.0, 1.0), (1.0, 2.0, 2.0), spawn_frame=1)
    spec = SceneSpec(K, [look_pose((0, 0, 1.5))] * 2, [box], depth_model=CLEAN)
    assert not np.any(render_frame(spec, 0).gt == OBSTACLE)
    assert np.any(render_frame(spec, 1).gt == OBSTACLE)


def test_depth_noise_and_dropout_rates():
    spec = SceneSpec(K, [look_pose((0, 0, 1.5), 0.0, 20.0)], depth_model=DepthModel(15.0, 0.01, 0.05), rng_seed=3)
    f = render_frame(spec, 0)
    inrange = np.isfinite(f.true_depth) & (f.true_depth <= 15.0)
    dropped = inrange & (f.depth == 0)
    assert abs(dropped.sum() / inrange.sum() - 0.05) < 0.01
    kept = inrange & (f.depth > 0)
    rel = f.depth[kept] / f.true_depth[kept] - 1
    assert abs(rel.std() - 0.01) < 0.001


def test_render_is_seeded():
    spec = make_shift_sequence(5)
    a, b = render_frame(spec, 10), render_frame(spec, 10)
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth, b.depth)
    assert make_shift_sequence(5).digest() == spec.digest()
    assert make_shift_sequence(6).digest() != spec.digest()


def test_shift_benchmark_schedule():
    spec = make_shift_sequence(7)
    assert len(spec.camera_path) == 200
    fam_b = [j + 1 for j, b in enumerate(spec.obstacles) if b.family == "B"]
    assert all(b.spawn_frame >= 100 for b in spec.obstacles if b.family == "B")
    early = render_frame(spec, 50)
    assert not np.isin(early.hit_id, fam_b).any()
    late = render_frame(spec, 150)
    b_pixels = np.isin(late.hit_id, fam_b)
    assert (b_pixels & (late.true_depth <= 15)).any()
    assert (b_pixels & (late.true_depth > 15)).any()


def test_base_sequence_has_only_family_a():
    spec = make_base_sequence(1, frames=10)
    assert len(spec.camera_path) == 10
    assert {b.family for b in spec.obstacles} == {"A"}


def test_validation():
    with pytest.raises(ConfigError):
        SceneSpec(K, []).validate()
    with pytest.raises(ConfigError):
        SceneSpec(K, [look_pose((0, 0, 1))], [Box((3, 0, 0.0), (1, 1, 1))]).validate()
    with pytest.raises(ConfigError):
        render_frame(SceneSpec(K, [look_pose((0, 0, 1))]), 1)


def test_scene_json_roundtrip():
    spec = make_shift_sequence(2)
    again = SceneSpec.from_dict(spec.to_dict())
    assert again.digest() == spec.digest()


def test_pure_ground_labels_match_gt():
    spec = SceneSpec(K, [look_pose((0, 0, 1.5), 0.0, 12.0)], depth_model=CLEAN)
    f = render_frame(spec, 0)
    plane = fit_plane_ransac(backproject_image(f.depth, K), f.pose.up_in_camera(), RansacConfig())
    labels = generate_labels(f.depth, K, plane)
    valid = f.depth > 0
    assert valid.sum() > 1000
    assert np.array_equal(labels[valid], f.gt[valid])


def test_export_and_ingest(tmp_path):
    spec = make_base_sequence(4, frames=3)
    assert export_sequence(spec, tmp_path / "s") == 3
    root = tmp_path / "s"
    for sub in ("rgb", "depth", "gt"):
        assert len(list((root / sub).glob("*.png"))) == 3
    assert len((root / "poses.txt").read_text().splitlines()) == 3
    f1 = render_frame(spec, 1)
    png = np.array(Image.open(root / "depth" / "0001.png"))
    assert png.dtype == np.uint16
    assert np.array_equal(png, np.rint(f1.depth * 1000).astype(np.uint16))
    seq = Sequence(root)
    frame = seq.load(1)
    assert np.abs(frame.depth - f1.depth).max() <= 0.0005 + 1e-12
    assert np.array_equal(frame.rgb, f1.rgb) and np.array_equal(frame.gt, f1.gt)
    np.testing.assert_allclose(frame.pose.R, f1.pose.R, atol=1e-12)
    assert seq.seed == 4


def test_depth_png_clips_out_of_range():
    arr = depth_to_png_array(np.array([0.0, 1.2346, 70.0, np.inf, np.nan]))
    assert arr.tolist() == [0, 1235, 0, 0, 0]
