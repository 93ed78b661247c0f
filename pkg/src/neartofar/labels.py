"""Self-supervised labels from near-range geometry.

Label maps are plain ``uint8`` arrays using the on-disk encoding:
0 = free space, 1 = obstacle, 255 = unknown.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .geometry import DEFAULT_MAX_RANGE, CameraIntrinsics, check_depth_shape, pixel_rays, valid_depth_mask
from .plane import Plane

FREE = 0
OBSTACLE = 1
UNKNOWN = 255


@dataclass
class LabelingConfig:
    h_obstacle: float = 0.15
    max_range: float = DEFAULT_MAX_RANGE

    def __post_init__(self):
        if not self.h_obstacle > 0:
            raise InvalidInputError("h_obstacle must be positive")
        if not self.max_range > 0:
            raise InvalidInputError("max_range must be positive")


def generate_labels(depth, k: CameraIntrinsics, plane: Plane, cfg: LabelingConfig | None = None) -> np.ndarray:
    """Obstacle where a valid-depth pixel sits at least ``h_obstacle`` above the plane."""
    cfg = cfg or LabelingConfig()
    depth = np.asarray(depth, dtype=np.float64)
    check_depth_shape(depth, k)
    valid = valid_depth_mask(depth, cfg.max_range)
    labels = np.full(depth.shape, UNKNOWN, dtype=np.uint8)
    pts = pixel_rays(k)[valid] * depth[valid][:, None]
    height = pts @ plane.n + plane.offset
    labels[valid] = np.where(height >= cfg.h_obstacle, OBSTACLE, FREE)
    return labels


def label_histogram(labels) -> tuple[int, int, int]:
    """(free, obstacle, unknown) pixel counts."""
    labels = np.asarray(labels)
    free = int(np.count_nonzero(labels == FREE))
    obstacle = int(np.count_nonzero(labels == OBSTACLE))
    return free, obstacle, labels.size - free - obstacle
