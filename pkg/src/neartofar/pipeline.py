"""Experiment plumbing: run configuration, offline pre-training, replay, evaluation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import Sequence, frame_ids, read_depth, read_labels
from .errors import ConfigError, DataError, InvalidInputError
from .labels import FREE, OBSTACLE, UNKNOWN, LabelingConfig
from .metrics import MetricReport, far_field_mask, frame_metrics
from .network import (
    ENCODER_KEYS,
    LossConfig,
    NetworkParams,
    init_params,
    load_params,
    loss_and_grads,
    normalize_rgb,
    save_params,
    sgd_step,
)
from .online import OnlineConfig, OnlineLearner, Segmentation
from .plane import RansacConfig

log = logging.getLogger(__name__)

RED = np.array([255.0, 0.0, 0.0])
BLUE = np.array([0.0, 0.0, 255.0])
MODES = ("online", "frozen")


@dataclass
class RunConfig:
    sequence: str = ""
    params: str = ""
    output: str = "run"
    mode: str = "online"
    overlay_alpha: float = 0.5
    ransac: RansacConfig = field(default_factory=RansacConfig)
    labeling: LabelingConfig = field(default_factory=LabelingConfig)
    online: OnlineConfig = field(default_factory=OnlineConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    SECTIONS = {"ransac": RansacConfig, "labeling": LabelingConfig, "online": OnlineConfig, "loss": LossConfig}

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.overlay_alpha <= 1:
            raise ConfigError("overlay_alpha must be in [0, 1]")

    def effective_online(self) -> OnlineConfig:
        """Online settings with frozen mode forcing zero update steps."""
        cfg = OnlineConfig(**asdict(self.online))
        if self.mode == "frozen":
            cfg.steps_per_frame = 0
        return cfg

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in self.SECTIONS}
        for name in self.SECTIONS:
            out[name] = asdict(getattr(self, name))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            kwargs = {}
            for name, section in cls.SECTIONS.items():
                kwargs[name] = section(**d.pop(name, {}))
            cfg = cls(**d, **kwargs)
        except (TypeError, InvalidInputError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Apply ``{"section.key": value}`` or ``{"key": value}`` overrides."""
        d = self.to_dict()
        for dotted, value in overrides.items():
            if value is None:
                continue
            node = d
            *path, leaf = dotted.split(".")
            for part in path:
                if part not in node or not isinstance(node[part], dict):
                    raise ConfigError(f"unknown config section {dotted!r}")
                node = node[part]
            if leaf not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[leaf] = value
        return RunConfig.from_dict(d)


def default_config_json() -> str:
    return json.dumps(RunConfig().to_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- pretraining

@dataclass
class PretrainConfig:
    epochs: int = 3
    seed: int = 0
    lr: float = 0.05
    momentum: float = 0.9
    batch_frames: int = 4
    ransac: RansacConfig = field(default_factory=RansacConfig)
    labeling: LabelingConfig = field(default_factory=LabelingConfig)
    loss: LossConfig = field(default_factory=LossConfig)


def check_seed_disjoint(train_seeds, test_seeds) -> None:
    overlap = sorted(set(s for s in train_seeds if s is not None) & set(s for s in test_seeds if s is not None))
    if overlap:
        raise ConfigError(f"training and test scene seeds overlap: {overlap}")


def self_labelled_frames(seq: Sequence, ransac: RansacConfig, labeling: LabelingConfig):
    """(rgb uint8, labels) for every frame of ``seq`` with a ground plane."""
    learner = OnlineLearner(init_params(0), seq.intrinsics, OnlineConfig(steps_per_frame=0), ransac, labeling)
    out = []
    for frame in seq:
        plane, _, labels = learner.self_label(frame.depth, frame.pose)
        if plane is not None and np.any(labels != UNKNOWN):
            out.append((frame.rgb, labels))
    return out


def pretrain(seq_dirs, cfg: PretrainConfig | None = None, test_seeds=()):
    """Offline training of the whole network on geometry-derived labels.

    Returns (params, per-epoch mean losses, training scene seeds).
    """
    cfg = cfg or PretrainConfig()
    if cfg.epochs < 0:
        raise ConfigError("epochs must be >= 0")
    seqs = [Sequence(d) for d in seq_dirs]
    if not seqs:
        raise ConfigError("no training sequences given")
    train_seeds = [s.seed for s in seqs]
    check_seed_disjoint(train_seeds, test_seeds)
    params = init_params(cfg.seed)
    if cfg.epochs == 0:
        return params, [], train_seeds
    data = []
    for seq in seqs:
        data.extend(self_labelled_frames(seq, cfg.ransac, cfg.labeling))
    if not data:
        raise DataError("training sequences produced no self-labelled frames")
    rng = np.random.default_rng([cfg.seed, 1])
    velocity = NetworkParams()
    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), cfg.batch_frames):
            batch = [data[i] for i in order[start:start + cfg.batch_frames]]
            images = np.stack([normalize_rgb(rgb) for rgb, _ in batch])
            labels = np.stack([lab for _, lab in batch])
            value, grads = loss_and_grads(params, images, labels, cfg.loss)
            params, velocity = sgd_step(params, grads, cfg.lr, cfg.momentum, velocity)
            losses.append(value)
        epoch_losses.append(float(np.mean(losses)))
        log.info("epoch %d loss %.5f", epoch + 1, epoch_losses[-1])
    return params, epoch_losses, train_seeds


# ---------------------------------------------------------------- replay

def overlay(rgb, labels, alpha=0.5, untinted=None) -> np.ndarray:
    """Alpha-blend red (obstacle) / blue (free space) over ``rgb``."""
    out = np.asarray(rgb, dtype=np.float64).copy()
    for cls, color in ((OBSTACLE, RED), (FREE, BLUE)):
        m = labels == cls
        if untinted is not None:
            m &= ~untinted
        out[m] = (1 - alpha) * out[m] + alpha * color
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


@dataclass
class ReplayResult:
    reports: dict
    n_frames: int
    n_predicted: int
    initial_digest: str
    final_digest: str
    encoder_digest_before: str
    encoder_digest_after: str


def replay(cfg: RunConfig) -> ReplayResult:
    """Run the near-to-far loop over a sequence directory and write artefacts.

    Output directory::

        overlays/pred_NNNN.png    prediction overlay
        overlays/labels_NNNN.png  near-range geometric labels overlay
        pred/NNNN.png             predicted labels (0 free / 1 obstacle)
        conf/NNNN.npy             obstacle confidence, float64
        runlog.jsonl              one JSON record per frame
        metrics_all.csv, metrics_far.csv   when the sequence has GT
        params_final.npz, summary.json, config.json
    """
    cfg.validate()
    seq = Sequence(cfg.sequence)
    try:
        params, meta = load_params(cfg.params, with_metadata=True)
    except OSError as exc:
        raise DataError(f"{cfg.params}: {exc}") from exc
    check_seed_disjoint(meta.get("train_seeds", []), [seq.seed])

    out = Path(cfg.output)
    for sub in ("overlays", "pred", "conf"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")

    online_cfg = cfg.effective_online()
    learner = OnlineLearner(params, seq.intrinsics, online_cfg, cfg.ransac, cfg.labeling, cfg.loss)
    initial_digest = learner.params.digest()
    enc_before = learner.params.digest(ENCODER_KEYS)
    reports = {"all": MetricReport("all"), "far": MetricReport("far")}
    n_frames = n_predicted = 0
    alpha = cfg.overlay_alpha
    with open(out / "runlog.jsonl", "w") as runlog:
        for frame in seq:
            rec = learner.step(frame)
            n_frames += 1
            name = f"{frame.frame_id:04d}.png"
            sky = frame.gt == UNKNOWN if frame.gt is not None else None
            Image.fromarray(overlay(frame.rgb, rec.labels, alpha)).save(out / "overlays" / f"labels_{name}")
            record = rec.summary()
            if rec.segmentation is not None:
                n_predicted += 1
                seg = rec.segmentation
                Image.fromarray(overlay(frame.rgb, seg.labels, alpha, sky)).save(out / "overlays" / f"pred_{name}")
                Image.fromarray(seg.labels).save(out / "pred" / name)
                np.save(out / "conf" / f"{frame.frame_id:04d}.npy", seg.confidence)
                if frame.gt is not None:
                    far = far_field_mask(frame.depth, cfg.labeling.max_range)
                    m_all = frame_metrics(seg, frame.gt)
                    m_far = frame_metrics(seg, frame.gt, far)
                    reports["all"].add(frame.frame_id, m_all)
                    reports["far"].add(frame.frame_id, m_far)
                    record["metrics"] = {"all": m_all, "far": m_far}
            runlog.write(json.dumps(record, sort_keys=True) + "\n")

    if seq.has_gt:
        for region, report in reports.items():
            (out / f"metrics_{region}.csv").write_text(report.to_csv())
    save_params(learner.params, out / "params_final.npz", {"train_seeds": meta.get("train_seeds", [])})
    result = ReplayResult(reports if seq.has_gt else {}, n_frames, n_predicted, initial_digest,
                          learner.params.digest(), enc_before, learner.params.digest(ENCODER_KEYS))
    summary = {
        "mode": cfg.mode,
        "frames": n_frames,
        "predicted": n_predicted,
        "params_digest_initial": initial_digest,
        "params_digest_final": result.final_digest,
        "encoder_digest_initial": enc_before,
        "encoder_digest_final": result.encoder_digest_after,
    }
    if seq.has_gt:
        summary["aggregate"] = {r: rep.aggregate() for r, rep in reports.items()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------- evaluation

def _resolve_pred_dirs(path):
    path = Path(path)
    if (path / "pred").is_dir():
        conf = path / "conf"
        return path / "pred", conf if conf.is_dir() else None
    return path, None


def _resolve_gt(path):
    path = Path(path)
    if (path / "gt").is_dir():
        depth = path / "depth"
        return path / "gt", depth if depth.is_dir() else None
    return path, None


def evaluate(pred_path, gt_path, region="all", max_range=LabelingConfig().max_range) -> MetricReport:
    """Metric report for a prediction directory (or replay run directory)
    against a GT directory (or sequence directory)."""
    if region not in ("all", "far"):
        raise ConfigError(f"region must be 'all' or 'far', got {region!r}")
    pred_dir, conf_dir = _resolve_pred_dirs(pred_path)
    gt_dir, depth_dir = _resolve_gt(gt_path)
    if region == "far" and depth_dir is None:
        raise DataError(f"{gt_path}: far-field evaluation needs the sequence's depth/ directory")
    pred_ids, gt_ids = frame_ids(pred_dir, ""), frame_ids(gt_dir, "")
    if pred_ids != gt_ids:
        missing_pred = sorted(set(gt_ids) - set(pred_ids))
        missing_gt = sorted(set(pred_ids) - set(gt_ids))
        raise DataError(f"frame sets differ: missing predictions {missing_pred}, missing ground truth {missing_gt}")
    report = MetricReport(region)
    for fid in pred_ids:
        name = f"{fid:04d}.png"
        pred = read_labels(pred_dir / name)
        gt = read_labels(gt_dir / name)
        conf = None
        conf_file = conf_dir / f"{fid:04d}.npy" if conf_dir is not None else None
        if conf_file is not None and conf_file.exists():
            try:
                conf = np.load(conf_file, allow_pickle=False)
            except (OSError, ValueError) as exc:
                raise DataError(f"{conf_file}: {exc}") from exc
        mask = far_field_mask(read_depth(depth_dir / name), max_range) if region == "far" else None
        if pred.shape != gt.shape:
            raise DataError(f"{pred_dir / name}: size {pred.shape} != ground truth {gt.shape}")
        seg = Segmentation(pred, conf if conf is not None else (pred == OBSTACLE).astype(np.float64))
        report.add(fid, frame_metrics(seg, gt, mask))
    return report
