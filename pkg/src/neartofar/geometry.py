"""Pinhole camera model, poses and depth backprojection.

Conventions used throughout the package:

* camera frame: +z forward (optical axis), +x right, +y down
* world frame: +z up
* a depth value is the z coordinate along the optical axis, not the ray length
* depth 0 (or anything above ``max_range``) marks an invalid pixel
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

DEFAULT_MAX_RANGE = 15.0


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidInputError(f"principal point ({self.cx}, {self.cy}) outside image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics of the image downsampled by an integer block ``factor``."""
        # block averaging maps pixel centre u to (u + 0.5) / f - 0.5
        return CameraIntrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=(self.cx + 0.5) / factor - 0.5,
            cy=(self.cy + 0.5) / factor - 0.5,
            width=self.width // factor,
            height=self.height // factor,
        )

    def to_dict(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy, width=self.width, height=self.height)

    def save(self, path) -> None:
        """Write the plain-text ``key value`` intrinsics file."""
        lines = [f"{k} {v!r}" for k, v in self.to_dict().items()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "CameraIntrinsics":
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace("=", " ").replace(":", " ").split()
            if len(parts) != 2:
                raise InvalidInputError(f"{path}:{lineno}: expected 'key value', got {line!r}")
            values[parts[0]] = parts[1]
        missing = {"fx", "fy", "cx", "cy", "width", "height"} - values.keys()
        if missing:
            raise InvalidInputError(f"{path}: missing keys {sorted(missing)}")
        try:
            return cls(
                fx=float(values["fx"]),
                fy=float(values["fy"]),
                cx=float(values["cx"]),
                cy=float(values["cy"]),
                width=int(float(values["width"])),
                height=int(float(values["height"])),
            )
        except ValueError as exc:
            raise InvalidInputError(f"{path}: {exc}") from exc


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion given as (qx, qy, qz, qw)."""
    x, y, z, w = (float(c) for c in q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) with qw >= 0 for a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


@dataclass(frozen=True)
class Pose:
    """Camera-to-world transform: ``p_world = R @ p_cam + t``.

    ``rotation`` is a unit quaternion stored as (qx, qy, qz, qw), the same
    order as in pose files.
    """

    rotation: tuple = (0.0, 0.0, 0.0, 1.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if q.shape != (4,) or t.shape != (3,):
            raise InvalidInputError("pose needs a 4-element quaternion and a 3-element translation")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise InvalidInputError("pose contains non-finite values")
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise InvalidInputError(f"quaternion norm {np.linalg.norm(q):.9f} is not 1")
        object.__setattr__(self, "rotation", tuple(float(c) for c in q))
        object.__setattr__(self, "translation", tuple(float(c) for c in t))

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    @classmethod
    def from_matrix(cls, R, t) -> "Pose":
        return cls(tuple(matrix_to_quat(R)), tuple(np.asarray(t, dtype=np.float64)))

    def up_in_camera(self) -> np.ndarray:
        """World up (+z) expressed in the camera frame."""
        return self.R.T @ np.array([0.0, 0.0, 1.0])


@dataclass
class PointCloud:
    """3D points with the flat (row-major) index of the pixel each came from."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    pixel_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.points)


def backproject_pixel(u, v, z, k: CameraIntrinsics) -> np.ndarray:
    """Camera-frame 3D point seen at pixel (u, v) with depth ``z``."""
    z = float(z)
    if not np.isfinite(z) or z <= 0:
        raise InvalidInputError(f"depth must be positive and finite, got {z}")
    if not (0 <= u < k.width and 0 <= v < k.height):
        raise InvalidInputError(f"pixel ({u}, {v}) outside {k.width}x{k.height} image")
    return np.array([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z])


def valid_depth_mask(depth: np.ndarray, max_range: float = DEFAULT_MAX_RANGE) -> np.ndarray:
    depth = np.asarray(depth)
    with np.errstate(invalid="ignore"):
        return np.isfinite(depth) & (depth > 0) & (depth <= max_range)


def check_depth_shape(depth: np.ndarray, k: CameraIntrinsics) -> None:
    if np.ndim(depth) != 2 or np.shape(depth) != k.shape:
        raise InvalidInputError(f"depth shape {np.shape(depth)} does not match intrinsics {k.shape}")


def pixel_rays(k: CameraIntrinsics) -> np.ndarray:
    """(H, W, 3) camera-frame ray directions scaled to unit z."""
    u = np.arange(k.width, dtype=np.float64)
    v = np.arange(k.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1)


def backproject_image(depth: np.ndarray, k: CameraIntrinsics, max_range: float = DEFAULT_MAX_RANGE) -> PointCloud:
    depth = np.asarray(depth, dtype=np.float64)
    check_depth_shape(depth, k)
    valid = valid_depth_mask(depth, max_range)
    idx = np.flatnonzero(valid)
    z = depth.ravel()[idx]
    rays = pixel_rays(k).reshape(-1, 3)[idx]
    return PointCloud(points=rays * z[:, None], pixel_index=idx)


def transform_to_world(cloud: PointCloud, pose: Pose) -> PointCloud:
    if not isinstance(pose, Pose):
        raise InvalidInputError("transform_to_world needs a Pose")
    pts = cloud.points @ pose.R.T + pose.t
    return PointCloud(points=pts, pixel_index=cloud.pixel_index.copy())

