import shutil

import numpy as np
import pytest
from PIL import Image

from neartofar.dataset import (
    Sequence, block_mean, downscale_depth, downscale_factor, frame_ids, ingest_sequence, read_depth, read_poses,
)
from neartofar.errors import DataError
from neartofar.geometry import CameraIntrinsics
from neartofar.synth import export_sequence, make_base_sequence


@pytest.fixture(scope="module")
def seq_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("seq") / "base"
    export_sequence(make_base_sequence(9, frames=4), d)
    return d


def test_ingest_yields_frames_in_order(seq_dir):
    frames = list(ingest_sequence(seq_dir))
    assert [f.frame_id for f in frames] == [0, 1, 2, 3]
    f = frames[0]
    assert f.rgb.shape == (120, 160, 3) and f.rgb.dtype == np.uint8
    assert f.depth.dtype == np.float64 and f.depth.max() <= 15.0
    assert f.gt is not None


def test_missing_pose_names_file_and_frame(seq_dir, tmp_path):
    d = tmp_path / "s"
    shutil.copytree(seq_dir, d)
    lines = (d / "poses.txt").read_text().splitlines()
    (d / "poses.txt").write_text("\n".join(l for l in lines if not l.startswith("2 ")) + "\n")
    seq = Sequence(d)
    seq.load(1)
    with pytest.raises(DataError, match=r"poses\.txt.*frame 2"):
        seq.load(2)


def test_malformed_pose_line(tmp_path):
    p = tmp_path / "poses.txt"
    p.write_text("# comment\n0 0 0 1 0 0 0 1\n1 0 0 1 0 0\n")
    with pytest.raises(DataError, match=r"poses\.txt:3"):
        read_poses(p)


def test_non_unit_quaternion_rejected(tmp_path):
    p = tmp_path / "poses.txt"
    p.write_text("0 0 0 1 0 0 0 2\n")
    with pytest.raises(DataError):
        read_poses(p)


def test_no_gt_stream(seq_dir, tmp_path):
    d = tmp_path / "s"
    shutil.copytree(seq_dir, d)
    shutil.rmtree(d / "gt")
    seq = Sequence(d)
    assert not seq.has_gt
    assert all(f.gt is None for f in seq)


def test_missing_directory(tmp_path):
    with pytest.raises(DataError):
        Sequence(tmp_path / "nope")
    with pytest.raises(DataError):
        frame_ids(tmp_path)


def test_depth_millimetres(tmp_path):
    Image.fromarray(np.array([[0, 1500, 65535]], np.uint16)).save(tmp_path / "d.png")
    assert read_depth(tmp_path / "d.png").tolist() == [[0.0, 1.5, 65.535]]


def test_rgb_as_depth_rejected(tmp_path):
    Image.fromarray(np.zeros((2, 2, 3), np.uint8)).save(tmp_path / "d.png")
    with pytest.raises(DataError):
        read_depth(tmp_path / "d.png")


def test_block_mean_and_depth_downscale():
    img = np.arange(16, dtype=float).reshape(4, 4)
    assert block_mean(img, 2).tolist() == [[2.5, 4.5], [10.5, 12.5]]
    depth = np.array([[2.0, 4.0, 0.0, 0.0],
                      [0.0, 0.0, 0.0, 3.0],
                      [1.0, 1.0, 5.0, 5.0],
                      [1.0, 1.0, 5.0, 5.0]])
    # a block with half of its samples valid keeps their mean; fewer is invalid
    assert downscale_depth(depth, 2).tolist() == [[3.0, 0.0], [1.0, 5.0]]


def test_downscale_factor():
    assert downscale_factor((120, 160)) == 1
    assert downscale_factor((480, 640)) == 4
    with pytest.raises(DataError):
        downscale_factor((100, 160))


def test_high_resolution_sequence_is_downscaled(seq_dir, tmp_path):
    d = tmp_path / "big"
    shutil.copytree(seq_dir, d)
    for sub in ("rgb", "depth", "gt"):
        for p in (d / sub).glob("*.png"):
            im = Image.open(p)
            im.resize((im.width * 2, im.height * 2), Image.NEAREST).save(p)
    CameraIntrinsics(fx=200.0, fy=200.0, cx=160.5, cy=120.5, width=320, height=240).save(d / "intrinsics.txt")
    seq = Sequence(d)
    assert seq.factor == 2
    k = seq.intrinsics
    assert (k.fx, k.cx, k.cy, k.width, k.height) == (100.0, 80.0, 60.0, 160, 120)
    big, small = seq.load(0), Sequence(seq_dir).load(0)
    assert np.array_equal(big.gt, small.gt)
    assert np.array_equal(big.rgb, small.rgb)
    assert np.allclose(big.depth, small.depth)
