"""Deterministic synthetic RGB-D sequences with exact ground truth.

The world is the ground plane z = 0 plus axis-aligned boxes. Each pixel ray
is cast against the ground and every active box; the nearest hit decides
colour, depth and ground-truth label. Depth is then corrupted by a simple
sensor model (range cut-off, relative Gaussian noise, dropout).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError
from .geometry import CameraIntrinsics, Pose, pixel_rays
from .labels import FREE, OBSTACLE, UNKNOWN

SKY_COLOR = (0.62, 0.74, 0.90)
HAZE_COLOR = (0.70, 0.72, 0.75)

# obstacle colour families for the shift benchmark: A (warm) before the
# shift, B (cool, never seen in pre-training) after it
GROUND_COLOR = (0.46, 0.43, 0.36)
FAMILY_A = ((0.80, 0.22, 0.16), (0.86, 0.52, 0.14), (0.66, 0.30, 0.30))
FAMILY_B = ((0.20, 0.48, 0.62), (0.26, 0.58, 0.50))

SHIFT_FRAMES = 200
SHIFT_AT = 100


@dataclass
class Appearance:
    color: tuple = GROUND_COLOR
    noise_sigma: float = 0.05


@dataclass
class Box:
    center: tuple
    size: tuple
    appearance: Appearance = field(default_factory=Appearance)
    spawn_frame: int = 0
    family: str = "A"

    @property
    def lo(self):
        return np.asarray(self.center) - np.asarray(self.size) / 2

    @property
    def hi(self):
        return np.asarray(self.center) + np.asarray(self.size) / 2


@dataclass
class DepthModel:
    max_valid_range: float = 15.0
    noise_rel: float = 0.01
    dropout: float = 0.05


@dataclass
class SceneSpec:
    intrinsics: CameraIntrinsics
    camera_path: list
    obstacles: list = field(default_factory=list)
    ground: Appearance = field(default_factory=Appearance)
    depth_model: DepthModel = field(default_factory=DepthModel)
    haze_distance: float = 0.0
    rng_seed: int = 0
    name: str = "custom"

    def validate(self) -> None:
        if not self.camera_path:
            raise ConfigError("camera_path is empty")
        for i, pose in enumerate(self.camera_path):
            if not isinstance(pose, Pose):
                raise ConfigError(f"camera_path[{i}] is not a Pose")
            if pose.translation[2] <= 0:
                raise ConfigError(f"camera_path[{i}] height {pose.translation[2]} must be > 0")
        for i, box in enumerate(self.obstacles):
            if np.any(np.asarray(box.size) <= 0):
                raise ConfigError(f"obstacle {i}: non-positive size")
            if box.lo[2] < 0:
                raise ConfigError(f"obstacle {i}: extends below the ground (min z {box.lo[2]})")
        dm = self.depth_model
        if not dm.max_valid_range > 0:
            raise ConfigError("max_valid_range must be positive")
        if dm.noise_rel < 0 or not 0 <= dm.dropout <= 1:
            raise ConfigError("depth noise must be >= 0 and dropout in [0, 1]")
        if self.haze_distance < 0:
            raise ConfigError("haze_distance must be >= 0")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "rng_seed": self.rng_seed,
            "intrinsics": self.intrinsics.to_dict(),
            "camera_path": [{"rotation": list(p.rotation), "translation": list(p.translation)}
                            for p in self.camera_path],
            "obstacles": [asdict(b) for b in self.obstacles],
            "ground": asdict(self.ground),
            "depth_model": asdict(self.depth_model),
            "haze_distance": self.haze_distance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        try:
            spec = cls(
                intrinsics=CameraIntrinsics(**d["intrinsics"]),
                camera_path=[Pose(tuple(p["rotation"]), tuple(p["translation"])) for p in d["camera_path"]],
                obstacles=[Box(tuple(b["center"]), tuple(b["size"]),
                               Appearance(tuple(b["appearance"]["color"]), b["appearance"]["noise_sigma"]),
                               int(b.get("spawn_frame", 0)), b.get("family", "A"))
                           for b in d.get("obstacles", [])],
                ground=Appearance(**{**asdict(Appearance()), **d.get("ground", {})}),
                depth_model=DepthModel(**d.get("depth_model", {})),
                haze_distance=float(d.get("haze_distance", 0.0)),
                rng_seed=int(d.get("rng_seed", 0)),
                name=d.get("name", "custom"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad scene description: {exc}") from exc
        spec.validate()
        return spec

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SynthFrame:
    rgb: np.ndarray          # uint8 (H, W, 3)
    depth: np.ndarray        # metres, 0 = invalid
    pose: Pose
    gt: np.ndarray           # uint8 label map over the full image
    hit_id: np.ndarray       # -1 sky, 0 ground, j + 1 for obstacle j
    true_depth: np.ndarray   # uncorrupted depth, inf for sky
    frame_index: int = 0


def look_pose(position, yaw_deg=0.0, pitch_down_deg=0.0) -> Pose:
    """Camera at ``position`` looking along world +x rotated by ``yaw`` (about +z),
    tilted down by ``pitch_down``."""
    yaw, pitch = np.deg2rad(yaw_deg), np.deg2rad(pitch_down_deg)
    fwd = np.array([np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), -np.sin(pitch)])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.cross(fwd, right)
    return Pose.from_matrix(np.column_stack([right, down, fwd]), position)


def _ray_box(origin, dirs, lo, hi):
    """Entry parameter of each ray into the box (inf when missed)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # rays parallel to a slab: inside the slab -> unconstrained, outside -> miss
    parallel = dirs == 0
    inside = (origin >= lo) & (origin <= hi)
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    enter = tmin.max(axis=-1)
    leave = tmax.min(axis=-1)
    return np.where((enter <= leave) & (enter > 0), enter, np.inf)


def raycast(spec: SceneSpec, frame_index: int):
    """(true depth, hit id) for every pixel; depth is the optical-axis distance."""
    pose = spec.camera_path[frame_index]
    rays = pixel_rays(spec.intrinsics)             # unit z, so ray parameter == depth
    dirs = rays @ pose.R.T
    origin = pose.t
    with np.errstate(divide="ignore"):
        t_ground = np.where(dirs[..., 2] < 0, -origin[2] / dirs[..., 2], np.inf)
    depth = t_ground
    hit = np.where(np.isfinite(t_ground), 0, -1)
    for j, box in enumerate(spec.obstacles):
        if box.spawn_frame > frame_index:
            continue
        t_box = _ray_box(origin, dirs, box.lo, box.hi)
        closer = t_box < depth
        depth = np.where(closer, t_box, depth)
        hit = np.where(closer, j + 1, hit)
    return depth, hit


def render_frame(spec: SceneSpec, frame_index: int) -> SynthFrame:
    if not 0 <= frame_index < len(spec.camera_path):
        raise ConfigError(f"frame {frame_index} outside camera path of {len(spec.camera_path)}")
    true_depth, hit = raycast(spec, frame_index)
    h, w = hit.shape
    rng = np.random.default_rng([spec.rng_seed, frame_index])

    colors = np.empty((h, w, 3))
    sigma = np.empty((h, w))
    colors[:] = SKY_COLOR
    sigma[:] = 0.02
    colors[hit == 0] = spec.ground.color
    sigma[hit == 0] = spec.ground.noise_sigma
    for j, box in enumerate(spec.obstacles):
        m = hit == j + 1
        if m.any():
            colors[m] = box.appearance.color
            sigma[m] = box.appearance.noise_sigma
    if spec.haze_distance > 0:
        fade = np.where(np.isfinite(true_depth), 1.0 - np.exp(-true_depth / spec.haze_distance), 0.0)
        colors = colors * (1 - fade[..., None]) + np.asarray(HAZE_COLOR) * fade[..., None]
    texture = rng.standard_normal((h, w, 3)) * sigma[..., None]
    rgb = np.clip(np.rint((colors + texture) * 255.0), 0, 255).astype(np.uint8)

    dm = spec.depth_model
    depth = np.where(np.isfinite(true_depth) & (true_depth <= dm.max_valid_range), true_depth, 0.0)
    noise = rng.standard_normal((h, w))
    drop = rng.random((h, w)) < dm.dropout
    depth = np.where(depth > 0, depth * (1.0 + dm.noise_rel * noise), 0.0)
    depth = np.where(drop | (depth < 0), 0.0, depth)

    gt = np.full((h, w), UNKNOWN, dtype=np.uint8)
    gt[hit == 0] = FREE
    gt[hit > 0] = OBSTACLE
    return SynthFrame(rgb, depth, spec.camera_path[frame_index], gt, hit, true_depth, frame_index)


def default_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=100.0, fy=100.0, cx=80.0, cy=60.0, width=160, height=120)


def _straight_path(n, speed, height, pitch_down):
    return [look_pose((speed * i, 0.0, height), 0.0, pitch_down) for i in range(n)]


def _random_box(rng, x, family, palette, spawn, lateral=(2.0, 7.0), footprint=(0.8, 2.5),
                height=(0.8, 2.5), sigma=0.05):
    side = rng.choice([-1.0, 1.0])
    sx, sy = rng.uniform(*footprint, size=2)
    sz = rng.uniform(*height)
    y = side * (rng.uniform(*lateral) + sy / 2)
    color = palette[rng.integers(len(palette))]
    return Box((float(x), float(y), float(sz / 2)), (float(sx), float(sy), float(sz)),
               Appearance(tuple(color), sigma), int(spawn), family)


def make_base_sequence(seed: int, frames: int = 100) -> SceneSpec:
    """Family-A-only scene (pre-training material)."""
    return _make_scene(seed, frames, shift=False)


def make_shift_sequence(seed: int) -> SceneSpec:
    """Canonical 200-frame benchmark.

    Frames 0-99 contain only family-A (warm coloured) obstacles. From frame
    100 on, family-B (cool coloured) obstacles spawn 16-35 m ahead of the
    camera and are approached through the near range as the camera moves
    forward at constant height.
    """
    return _make_scene(seed, SHIFT_FRAMES, shift=True)


def _make_scene(seed, frames, shift, speed=0.4, cam_height=1.5, pitch_down=6.0):
    rng = np.random.default_rng([seed, 7919])
    path = _straight_path(frames, speed, cam_height, pitch_down)
    end_x = speed * frames + 60.0
    boxes = []
    x = 6.0
    while x < end_x:
        boxes.append(_random_box(rng, x, "A", FAMILY_A, 0))
        x += rng.uniform(2.5, 5.0)
    if shift:
        # one wave at the shift, then a steady trickle so that B obstacles
        # are always present both near and far
        spawns = [SHIFT_AT] * 3 + list(range(SHIFT_AT + 6, frames, 6))
        for spawn in spawns:
            cam_x = speed * spawn
            boxes.append(_random_box(rng, cam_x + rng.uniform(16.0, 35.0), "B", FAMILY_B, spawn,
                                     lateral=(1.0, 5.0), footprint=(1.2, 3.0), height=(1.2, 3.0)))
    spec = SceneSpec(
        intrinsics=default_intrinsics(),
        camera_path=path,
        obstacles=boxes,
        ground=Appearance(GROUND_COLOR, 0.05),
        depth_model=DepthModel(15.0, 0.01, 0.05),
        haze_distance=120.0,
        rng_seed=int(seed),
        name="shift" if shift else "base",
    )
    spec.validate()
    return spec


# ---------------------------------------------------------------- disk format

def depth_to_png_array(depth) -> np.ndarray:
    """Metres -> uint16 millimetres (0 = invalid)."""
    mm = np.rint(np.nan_to_num(np.asarray(depth, dtype=np.float64), nan=0.0, posinf=0.0) * 1000.0)
    return np.where((mm > 0) & (mm <= 65535), mm, 0).astype(np.uint16)


def write_pose_line(frame_id: int, pose: Pose) -> str:
    tx, ty, tz = pose.translation
    qx, qy, qz, qw = pose.rotation
    return f"{frame_id} {tx!r} {ty!r} {tz!r} {qx!r} {qy!r} {qz!r} {qw!r}"


def export_sequence(spec: SceneSpec, out_dir) -> int:
    """Write rgb/, depth/, gt/, poses.txt, intrinsics.txt and scene.json.

    Returns the number of frames written.
    """
    spec.validate()
    out = Path(out_dir)
    for sub in ("rgb", "depth", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    pose_lines = []
    for i in range(len(spec.camera_path)):
        f = render_frame(spec, i)
        name = f"{i:04d}.png"
        Image.fromarray(f.rgb).save(out / "rgb" / name)
        Image.fromarray(depth_to_png_array(f.depth)).save(out / "depth" / name)
        Image.fromarray(f.gt).save(out / "gt" / name)
        pose_lines.append(write_pose_line(i, f.pose))
    (out / "poses.txt").write_text("\n".join(pose_lines) + "\n")
    spec.intrinsics.save(out / "intrinsics.txt")
    (out / "scene.json").write_text(spec.to_json() + "\n")
    return len(spec.camera_path)
