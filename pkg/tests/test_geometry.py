import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neartofar.errors import InvalidInputError
from neartofar.geometry import (
    CameraIntrinsics,
    PointCloud,
    Pose,
    backproject_image,
    backproject_pixel,
    quat_to_matrix,
    transform_to_world,
)


def project(p, k):
    """Forward pinhole projection, written independently of the library."""
    x, y, z = p
    return k.fx * x / z + k.cx, k.fy * y / z + k.cy


def rotate_by_quaternion(q, p):
    """q * (0, p) * q^-1 with Hamilton products, (x, y, z, w) order."""
    def mul(a, b):
        ax, ay, az, aw = a
        bx, by, bz, bw = b
        return (aw * bx + ax * bw + ay * bz - az * by,
                aw * by - ax * bz + ay * bw + az * bx,
                aw * bz + ax * by - ay * bx + az * bw,
                aw * bw - ax * bx - ay * by - az * bz)
    conj = (-q[0], -q[1], -q[2], q[3])
    x, y, z, _ = mul(mul(q, (p[0], p[1], p[2], 0.0)), conj)
    return np.array([x, y, z])


@pytest.mark.parametrize("u, v, z, expected", [
    (80, 60, 2.0, (0.0, 0.0, 2.0)),
    (180, 60, 2.0, (2.0, 0.0, 2.0)),
    (80, 160, 0.5, (0.0, 0.5, 0.5)),
])
def test_backproject_pixel_examples(K, u, v, z, expected):
    np.testing.assert_allclose(backproject_pixel(u, v, z, K), expected, atol=1e-15)


@pytest.mark.parametrize("z", [0.0, -1.0, math.nan, math.inf])
def test_backproject_pixel_rejects_bad_depth(K, z):
    with pytest.raises(InvalidInputError):
        backproject_pixel(10, 10, z, K)


def test_backproject_pixel_rejects_out_of_bounds(K):
    with pytest.raises(InvalidInputError):
        backproject_pixel(K.width, 0, 1.0, K)


WIDE = CameraIntrinsics(fx=100.0, fy=100.0, cx=80.0, cy=60.0, width=320, height=240)


@settings(max_examples=200, deadline=None)
@given(u=st.floats(0, 319.99), v=st.floats(0, 239.99), z=st.floats(1e-3, 1e4))
def test_projection_round_trip(u, v, z):
    pu, pv = project(backproject_pixel(u, v, z, WIDE), WIDE)
    assert abs(pu - u) < 1e-9 and abs(pv - v) < 1e-9


def test_intrinsics_invariants():
    with pytest.raises(InvalidInputError):
        CameraIntrinsics(0, 100, 10, 10, 20, 20)
    with pytest.raises(InvalidInputError):
        CameraIntrinsics(100, 100, 20, 10, 20, 20)


def test_intrinsics_file_round_trip(tmp_path, K160):
    K160.save(tmp_path / "intrinsics.txt")
    assert CameraIntrinsics.load(tmp_path / "intrinsics.txt") == K160


def test_intrinsics_file_missing_key(tmp_path):
    (tmp_path / "k.txt").write_text("fx 1\nfy 1\n")
    with pytest.raises(InvalidInputError, match="missing"):
        CameraIntrinsics.load(tmp_path / "k.txt")


def test_backproject_image_all_invalid(K160):
    cloud = backproject_image(np.zeros(K160.shape), K160)
    assert len(cloud) == 0 and cloud.points.shape == (0, 3)


def test_backproject_image_single_pixel(K160):
    depth = np.zeros(K160.shape)
    depth[60, 80] = 1.0
    cloud = backproject_image(depth, K160)
    np.testing.assert_array_equal(cloud.points, [[0.0, 0.0, 1.0]])
    assert cloud.pixel_index.tolist() == [60 * 160 + 80]


def test_backproject_image_counts_valid_pixels(K160, rng):
    depth = rng.uniform(0.2, 25.0, K160.shape)
    depth[rng.random(K160.shape) < 0.2] = 0.0
    expected = sum(1 for z in depth.ravel() if 0 < z <= 15.0)
    cloud = backproject_image(depth, K160, max_range=15.0)
    assert len(cloud) == expected
    # provenance: each point is the backprojection of its own pixel
    for i in rng.choice(len(cloud), 50, replace=False):
        v, u = divmod(int(cloud.pixel_index[i]), K160.width)
        np.testing.assert_allclose(cloud.points[i], backproject_pixel(u, v, depth[v, u], K160), rtol=1e-15)


def test_backproject_image_dimension_mismatch(K160):
    with pytest.raises(InvalidInputError):
        backproject_image(np.ones((10, 10)), K160)


def test_pose_rejects_non_unit_quaternion():
    with pytest.raises(InvalidInputError):
        Pose((0.0, 0.0, 0.0, 1.1), (0.0, 0.0, 0.0))


def test_identity_pose_keeps_cloud(rng):
    pts = rng.normal(size=(20, 3))
    out = transform_to_world(PointCloud(pts, np.arange(20)), Pose())
    np.testing.assert_array_equal(out.points, pts)


def test_pure_translation():
    out = transform_to_world(PointCloud(np.array([[0.0, 0.0, 2.0]]), np.array([0])),
                             Pose(translation=(0.0, 0.0, 1.0)))
    np.testing.assert_allclose(out.points, [[0.0, 0.0, 3.0]])


def test_rotation_about_x_by_quarter_turn():
    s = math.sqrt(0.5)
    q = (s, 0.0, 0.0, s)    # +90 deg about x
    expected = rotate_by_quaternion(q, (0.0, 0.0, 1.0))
    np.testing.assert_allclose(expected, [0.0, -1.0, 0.0], atol=1e-15)
    out = transform_to_world(PointCloud(np.array([[0.0, 0.0, 1.0]]), np.array([0])), Pose(q))
    np.testing.assert_allclose(out.points[0], expected, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(q=st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1),
       t=st.lists(st.floats(-100, 100), min_size=3, max_size=3),
       seed=st.integers(0, 2**31))
def test_rigid_transform_preserves_distances(q, t, seed):
    q = np.array(q) / np.linalg.norm(q)
    pts = np.random.default_rng(seed).uniform(-10, 10, (8, 3))
    out = transform_to_world(PointCloud(pts, np.arange(8)), Pose(tuple(q), tuple(t))).points
    d_in = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d_out = np.linalg.norm(out[:, None] - out[None], axis=-1)
    assert np.max(np.abs(d_in - d_out)) < 1e-9
    for p, o in zip(pts, out):
        np.testing.assert_allclose(o, rotate_by_quaternion(q, p) + t, atol=1e-9)


def test_quat_matrix_round_trip(rng):
    for _ in range(20):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        q = q if q[3] >= 0 else -q
        p = Pose.from_matrix(quat_to_matrix(q), (0, 0, 0))
        np.testing.assert_allclose(p.rotation, q, atol=1e-12)
