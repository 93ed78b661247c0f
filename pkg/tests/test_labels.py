import numpy as np
import pytest

from neartofar.errors import InvalidInputError
from neartofar.geometry import backproject_image
from neartofar.labels import FREE, OBSTACLE, UNKNOWN, LabelingConfig, generate_labels, label_histogram
from neartofar.plane import Plane, RansacConfig, fit_plane_ransac
from neartofar.synth import make_shift_sequence, render_frame

from oracles import brute_force_labels

# camera 1.5 m above flat ground looking horizontally: height = 1.5 - y
LEVEL_GROUND = Plane((0.0, -1.0, 0.0), 1.5)


def test_invalid_depth_is_unknown(K160):
    depth = np.full(K160.shape, 3.0)
    depth[10, 20] = 0.0
    labels = generate_labels(depth, K160, LEVEL_GROUND)
    assert labels[10, 20] == UNKNOWN
    assert labels[11, 20] != UNKNOWN


def test_point_half_a_metre_up_is_obstacle(K160):
    # pixel row with y = 1.0 at z = 2: (v - 60) / 100 * 2 = 1.0 -> v = 110
    depth = np.zeros(K160.shape)
    depth[110, 80] = 2.0
    labels = generate_labels(depth, K160, LEVEL_GROUND, LabelingConfig(h_obstacle=0.15))
    assert labels[110, 80] == OBSTACLE


def test_ground_point_is_free(K160):
    # y = 1.5 at z = 2 -> v = 135 is outside; use z = 3: v = 60 + 50 = 110
    depth = np.zeros(K160.shape)
    depth[110, 80] = 3.0
    assert generate_labels(depth, K160, LEVEL_GROUND)[110, 80] == FREE


def test_below_ground_is_free(K160):
    depth = np.zeros(K160.shape)
    depth[119, 80] = 3.0     # y = 1.77 -> 0.27 m below the plane
    assert generate_labels(depth, K160, LEVEL_GROUND)[119, 80] == FREE


def test_beyond_range_is_unknown(K160):
    depth = np.full(K160.shape, 20.0)
    labels = generate_labels(depth, K160, LEVEL_GROUND, LabelingConfig(max_range=15.0))
    assert np.all(labels == UNKNOWN)


def test_dimension_mismatch(K160):
    with pytest.raises(InvalidInputError):
        generate_labels(np.ones((10, 10)), K160, LEVEL_GROUND)


def test_config_invariants():
    with pytest.raises(InvalidInputError):
        LabelingConfig(h_obstacle=0.0)


@pytest.fixture(scope="module")
def shift_frame():
    spec = make_shift_sequence(3)
    f = render_frame(spec, 150)
    cloud = backproject_image(f.depth, spec.intrinsics)
    plane = fit_plane_ransac(cloud, f.pose.up_in_camera(), RansacConfig())
    return spec.intrinsics, f, plane


def test_matches_brute_force_oracle(shift_frame):
    k, f, plane = shift_frame
    labels = generate_labels(f.depth, k, plane)
    expected = brute_force_labels(f.depth, k, plane.normal, plane.offset, 0.15, 15.0)
    assert np.count_nonzero(labels != expected) == 0


def test_validity_invariant(shift_frame):
    k, f, plane = shift_frame
    labels = generate_labels(f.depth, k, plane)
    valid = (f.depth > 0) & (f.depth <= 15.0)
    assert np.all(labels[valid] != UNKNOWN)
    assert np.all(labels[~valid] == UNKNOWN)


@pytest.mark.parametrize("low, high", [(0.05, 0.1), (0.15, 0.3), (0.3, 2.0)])
def test_raising_threshold_never_adds_obstacles(shift_frame, low, high):
    k, f, plane = shift_frame
    a = generate_labels(f.depth, k, plane, LabelingConfig(h_obstacle=low))
    b = generate_labels(f.depth, k, plane, LabelingConfig(h_obstacle=high))
    assert not np.any((a == FREE) & (b == OBSTACLE))


def test_histogram_all_unknown():
    assert label_histogram(np.full((4, 6), UNKNOWN, np.uint8)) == (0, 0, 24)


def test_histogram_half_and_half():
    labels = np.zeros((4, 6), np.uint8)
    labels[2:] = OBSTACLE
    assert label_histogram(labels) == (12, 12, 0)


def test_histogram_matches_recount(shift_frame):
    k, f, plane = shift_frame
    labels = generate_labels(f.depth, k, plane)
    free = obstacle = unknown = 0
    for value in labels.ravel():
        if value == 0:
            free += 1
        elif value == 1:
            obstacle += 1
        else:
            unknown += 1
    assert label_histogram(labels) == (free, obstacle, unknown)
    assert sum(label_histogram(labels)) == labels.size
