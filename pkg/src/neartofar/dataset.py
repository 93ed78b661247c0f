"""Sequence directories on disk.

Layout (shared by the synthetic exporter and real recordings)::

    <seq>/rgb/NNNN.png      8-bit RGB
    <seq>/depth/NNNN.png    16-bit millimetres, 0 = invalid
    <seq>/gt/NNNN.png       optional, 0 free / 1 obstacle / 255 unknown
    <seq>/poses.txt         "frame_id tx ty tz qx qy qz qw" (camera-to-world)
    <seq>/intrinsics.txt    "key value" lines: fx fy cx cy width height
    <seq>/scene.json        optional scene description (synthetic only)
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import DataError, InvalidInputError
from .geometry import CameraIntrinsics, Pose
from .online import Frame

NETWORK_SHAPE = (120, 160)


def read_png(path, mode=None) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if mode is not None and im.mode != mode:
                im = im.convert(mode)
            return np.array(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot read image ({exc})") from exc


def read_rgb(path) -> np.ndarray:
    return read_png(path, "RGB")


def read_depth(path) -> np.ndarray:
    """16-bit millimetre PNG -> float64 metres."""
    arr = read_png(path)
    if arr.ndim != 2 or not np.issubdtype(arr.dtype, np.integer):
        raise DataError(f"{path}: expected a single-channel 16-bit depth image, got {arr.dtype} {arr.shape}")
    return arr.astype(np.float64) / 1000.0


def read_labels(path) -> np.ndarray:
    arr = read_png(path)
    if arr.ndim != 2:
        raise DataError(f"{path}: expected a single-channel label image")
    return arr.astype(np.uint8)


def write_labels(path, labels) -> None:
    Image.fromarray(np.asarray(labels, dtype=np.uint8)).save(path)


def read_poses(path) -> dict[int, Pose]:
    poses = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"{path}: cannot read poses ({exc})") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DataError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            fid = int(parts[0])
            tx, ty, tz, qx, qy, qz, qw = (float(v) for v in parts[1:])
            poses[fid] = Pose((qx, qy, qz, qw), (tx, ty, tz))
        except (ValueError, InvalidInputError) as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return poses


def block_mean(img: np.ndarray, f: int) -> np.ndarray:
    h, w = img.shape[:2]
    return img.reshape(h // f, f, w // f, f, *img.shape[2:]).mean(axis=(1, 3))


def downscale_depth(depth: np.ndarray, f: int) -> np.ndarray:
    """Block mean over valid (non-zero) depths; a block with fewer than half
    valid samples becomes invalid."""
    h, w = depth.shape
    blocks = depth.reshape(h // f, f, w // f, f)
    valid = blocks > 0
    n = valid.sum(axis=(1, 3))
    total = np.where(valid, blocks, 0.0).sum(axis=(1, 3))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(n * 2 >= f * f, total / np.maximum(n, 1), 0.0)


def downscale_factor(shape, target=NETWORK_SHAPE) -> int:
    h, w = shape
    if h % target[0] or w % target[1] or h // target[0] != w // target[1]:
        raise DataError(f"frame size {w}x{h} is not an integer multiple of {target[1]}x{target[0]}")
    return h // target[0]


def read_scene_meta(seq_dir) -> dict | None:
    path = Path(seq_dir) / "scene.json"
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def sequence_seed(seq_dir) -> int | None:
    meta = read_scene_meta(seq_dir)
    return None if meta is None else int(meta["rng_seed"])


def frame_ids(seq_dir, sub="rgb") -> list[int]:
    d = Path(seq_dir) / sub
    if not d.is_dir():
        raise DataError(f"{d}: missing directory")
    ids = []
    for p in sorted(d.glob("*.png")):
        try:
            ids.append(int(p.stem))
        except ValueError as exc:
            raise DataError(f"{p}: file name is not a frame number") from exc
    return sorted(ids)


class Sequence:
    """A sequence directory, read lazily and resampled to network resolution."""

    def __init__(self, seq_dir, target_shape=NETWORK_SHAPE):
        self.root = Path(seq_dir)
        if not self.root.is_dir():
            raise DataError(f"{self.root}: sequence directory not found")
        try:
            native = CameraIntrinsics.load(self.root / "intrinsics.txt")
        except (OSError, InvalidInputError) as exc:
            raise DataError(f"{self.root / 'intrinsics.txt'}: {exc}") from exc
        self.factor = downscale_factor(native.shape, target_shape)
        self.native_intrinsics = native
        self.intrinsics = native if self.factor == 1 else native.scaled(self.factor)
        self.poses = read_poses(self.root / "poses.txt")
        self.ids = frame_ids(self.root)
        self.has_gt = (self.root / "gt").is_dir()
        self.seed = sequence_seed(self.root)

    def __len__(self):
        return len(self.ids)

    def load(self, fid: int) -> Frame:
        name = f"{fid:04d}.png"
        if fid not in self.poses:
            raise DataError(f"{self.root / 'poses.txt'}: no pose for frame {fid}")
        rgb = read_rgb(self.root / "rgb" / name)
        depth = read_depth(self.root / "depth" / name)
        gt = None
        if self.has_gt:
            gt = read_labels(self.root / "gt" / name)
        shape = self.native_intrinsics.shape
        for what, arr in (("rgb", rgb), ("depth", depth), ("gt", gt)):
            if arr is not None and arr.shape[:2] != shape:
                raise DataError(f"{self.root / what / name}: size {arr.shape[:2]} != intrinsics {shape}")
        if self.factor > 1:
            f = self.factor
            rgb = np.rint(block_mean(rgb.astype(np.float64), f)).astype(np.uint8)
            depth = downscale_depth(depth, f)
            if gt is not None:
                # block-centre sample keeps labels crisp
                gt = gt[f // 2::f, f // 2::f]
        return Frame(rgb, depth, self.poses[fid], fid, gt)

    def __iter__(self) -> Iterator[Frame]:
        for fid in self.ids:
            yield self.load(fid)


def ingest_sequence(seq_dir) -> Iterator[Frame]:
    """Lazily yield frames (rgb, depth in metres, pose, optional GT) in order."""
    return iter(Sequence(seq_dir))

