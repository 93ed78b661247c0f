"""Near-to-far loop: sliding window of self-labelled frames + online SGD."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .errors import InvalidInputError, NoGroundPlaneError
from .geometry import CameraIntrinsics, Pose, backproject_image
from .labels import FREE, OBSTACLE, UNKNOWN, LabelingConfig, generate_labels, label_histogram
from .network import (
    DECODER_KEYS,
    ENCODER_KEYS,
    LossConfig,
    NetworkParams,
    backward_from_logits,
    decode,
    encode,
    forward,
    loss_and_grads,
    loss_and_logit_grad,
    normalize_rgb,
    reinit_decoder,
    sgd_step,
    softmax,
)
from .plane import Plane, RansacConfig, fit_plane_ransac


@dataclass
class OnlineConfig:
    window_size: int = 10
    steps_per_frame: int = 5
    batch_frames: int = 4
    lr: float = 0.02
    momentum: float = 0.9
    train_decoder_only: bool = True
    rng_seed: int = 0
    infer_every_k: int = 1
    reinit_decoder: bool = False

    def __post_init__(self):
        if self.window_size < 1:
            raise InvalidInputError("window_size must be >= 1")
        if self.steps_per_frame < 0:
            raise InvalidInputError("steps_per_frame must be >= 0")
        if not 1 <= self.batch_frames <= self.window_size:
            raise InvalidInputError("batch_frames must be in [1, window_size]")
        if self.infer_every_k < 1:
            raise InvalidInputError("infer_every_k must be >= 1")


@dataclass
class WindowEntry:
    image: np.ndarray
    labels: np.ndarray
    frame_id: int
    # encoder output cached while the encoder is frozen, keyed by its digest
    features: np.ndarray | None = None
    features_key: str | None = None


class ReplayWindow:
    """FIFO of the last ``capacity`` self-labelled frames."""

    def __init__(self, capacity: int, shape: tuple[int, int] | None = None):
        if capacity < 1:
            raise InvalidInputError("window capacity must be >= 1")
        self.capacity = capacity
        self.shape = shape
        self.entries: deque[WindowEntry] = deque(maxlen=capacity)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def frame_ids(self) -> list[int]:
        return [e.frame_id for e in self.entries]

    def push(self, image, labels, frame_id) -> bool:
        """Append a frame, evicting the oldest at capacity.

        Returns False (and leaves the window untouched) for an all-Unknown
        label map.
        """
        image = np.asarray(image)
        labels = np.asarray(labels)
        if image.ndim != 3 or image.shape[:2] != labels.shape:
            raise InvalidInputError(f"image {image.shape} and labels {labels.shape} do not match")
        if self.shape is not None and labels.shape != tuple(self.shape):
            raise InvalidInputError(f"frame size {labels.shape} != network input {tuple(self.shape)}")
        if not np.any((labels == FREE) | (labels == OBSTACLE)):
            return False
        self.entries.append(WindowEntry(image, labels, frame_id))
        return True


def push_frame(window: ReplayWindow, image, labels, frame_id) -> ReplayWindow:
    window.push(image, labels, frame_id)
    return window


def _batch_features(entries, params, encoder_key):
    feats = []
    for e in entries:
        if e.features is None or e.features_key != encoder_key:
            e.features = encode(params, e.image)[0]
            e.features_key = encoder_key
        feats.append(e.features)
    return np.stack(feats)


def online_update(window: ReplayWindow, params: NetworkParams, cfg: OnlineConfig,
                  rng: np.random.Generator | None = None, velocity=None,
                  loss_cfg: LossConfig | None = None):
    """Run ``cfg.steps_per_frame`` SGD steps on mini-batches drawn from the window.

    Each step samples ``batch_frames`` distinct frames, pools their labelled
    pixels into one loss (class weights from the batch when
    ``loss_cfg.class_weights`` is None) and applies one momentum step.
    Returns (params, velocity, per-step losses).
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    velocity = velocity if velocity is not None else NetworkParams()
    losses: list[float] = []
    if len(window) == 0 or cfg.steps_per_frame == 0:
        return params, velocity, losses
    entries = list(window)
    trainable = DECODER_KEYS if cfg.train_decoder_only else tuple(params)
    encoder_key = params.digest(ENCODER_KEYS) if cfg.train_decoder_only else None
    for _ in range(cfg.steps_per_frame):
        k = min(cfg.batch_frames, len(entries))
        pick = rng.choice(len(entries), size=k, replace=False)
        batch = [entries[i] for i in pick]
        labels = np.stack([e.labels for e in batch])
        if cfg.train_decoder_only:
            cache = {}
            logits = decode(params, _batch_features(batch, params, encoder_key), cache)
            value, g = loss_and_logit_grad(logits, labels, loss_cfg)
            grads = backward_from_logits(params, cache, g, train_encoder=False)
        else:
            value, grads = loss_and_grads(params, np.stack([e.image for e in batch]), labels, loss_cfg)
        losses.append(value)
        params, velocity = sgd_step(params, grads, cfg.lr, cfg.momentum, velocity, trainable)
    return params, velocity, losses


@dataclass
class Segmentation:
    labels: np.ndarray          # uint8, FREE or OBSTACLE
    confidence: np.ndarray      # obstacle probability

    @property
    def obstacle_fraction(self) -> float:
        return float(np.mean(self.labels == OBSTACLE))


def segmentation_from_logits(logits) -> Segmentation:
    conf = softmax(np.asarray(logits))[..., OBSTACLE]
    return Segmentation(np.where(conf >= 0.5, OBSTACLE, FREE).astype(np.uint8), conf)


def predict(params, image) -> Segmentation:
    """Softmax segmentation of a normalized (H, W, 3) image."""
    return segmentation_from_logits(forward(params, image))


@dataclass
class Frame:
    rgb: np.ndarray
    depth: np.ndarray
    pose: Pose
    frame_id: int
    gt: np.ndarray | None = None


@dataclass
class FrameRecord:
    frame_id: int
    plane: Plane | None
    plane_status: str
    labels: np.ndarray
    segmentation: Segmentation | None
    losses: list = field(default_factory=list)
    window_ids: list = field(default_factory=list)
    accepted: bool = False

    def summary(self) -> dict:
        free, obstacle, unknown = label_histogram(self.labels)
        out = {
            "frame_id": self.frame_id,
            "plane_status": self.plane_status,
            "plane": self.plane.to_dict() if self.plane else None,
            "labels": {"free": free, "obstacle": obstacle, "unknown": unknown},
            "window_accepted": self.accepted,
            "window_size": len(self.window_ids),
            "losses": self.losses,
            "prediction": None,
        }
        if self.segmentation is not None:
            out["prediction"] = {
                "obstacle_fraction": self.segmentation.obstacle_fraction,
                "mean_confidence": float(np.mean(self.segmentation.confidence)),
            }
        return out


class OnlineLearner:
    """Stateful per-frame driver: geometry -> labels -> window -> update -> predict."""

    def __init__(self, params: NetworkParams, intrinsics: CameraIntrinsics,
                 online: OnlineConfig | None = None, ransac: RansacConfig | None = None,
                 labeling: LabelingConfig | None = None, loss: LossConfig | None = None):
        self.online = online or OnlineConfig()
        self.ransac = ransac or RansacConfig()
        self.labeling = labeling or LabelingConfig()
        self.loss = loss or LossConfig()
        self.k = intrinsics
        if self.online.reinit_decoder:
            params = reinit_decoder(params, self.online.rng_seed)
        self.params = params
        self.velocity = NetworkParams()
        self.window = ReplayWindow(self.online.window_size, intrinsics.shape)
        self.rng = np.random.default_rng(self.online.rng_seed)
        self.frames_seen = 0

    def self_label(self, depth, pose: Pose):
        """(plane or None, status, labels) for one frame's depth."""
        cloud = backproject_image(depth, self.k, self.labeling.max_range)
        try:
            plane = fit_plane_ransac(cloud, pose.up_in_camera(), self.ransac)
        except NoGroundPlaneError:
            return None, "no_ground_plane", np.full(self.k.shape, UNKNOWN, dtype=np.uint8)
        return plane, "ok", generate_labels(depth, self.k, plane, self.labeling)

    def step(self, frame: Frame) -> FrameRecord:
        rgb = np.asarray(frame.rgb)
        if rgb.shape[:2] != self.k.shape or np.shape(frame.depth) != self.k.shape:
            raise InvalidInputError(
                f"frame {frame.frame_id}: size {rgb.shape[:2]} / {np.shape(frame.depth)} != {self.k.shape}")
        image = normalize_rgb(rgb)
        plane, status, labels = self.self_label(frame.depth, frame.pose)
        accepted = False
        losses: list[float] = []
        if plane is not None:
            accepted = self.window.push(image, labels, frame.frame_id)
            self.params, self.velocity, losses = online_update(
                self.window, self.params, self.online, self.rng, self.velocity, self.loss)
        seg = None
        if self.frames_seen % self.online.infer_every_k == 0:
            seg = predict(self.params, image)
        self.frames_seen += 1
        return FrameRecord(frame.frame_id, plane, status, labels, seg, losses, self.window.frame_ids, accepted)


def run_sequence(frames: Iterable[Frame], intrinsics: CameraIntrinsics, params: NetworkParams,
                 online: OnlineConfig | None = None, ransac: RansacConfig | None = None,
                 labeling: LabelingConfig | None = None, loss: LossConfig | None = None,
                 learner: OnlineLearner | None = None) -> Iterator[FrameRecord]:
    """Yield one FrameRecord per input frame, in order.

    A frame whose ground plane cannot be fitted contributes no labels and no
    update but is still predicted. Errors are re-raised with the frame id.
    """
    learner = learner or OnlineLearner(params, intrinsics, online, ransac, labeling, loss)
    for frame in frames:
        try:
            yield learner.step(frame)
        except InvalidInputError as exc:
            raise InvalidInputError(f"frame {frame.frame_id}: {exc}") from exc
