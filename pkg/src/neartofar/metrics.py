"""IoU / AP evaluation against ground-truth label maps."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, NearToFarError
from .geometry import DEFAULT_MAX_RANGE, valid_depth_mask
from .labels import FREE, OBSTACLE

METRIC_NAMES = ("iou_free", "iou_obstacle", "miou", "ap", "accuracy")
CSV_HEADER = ("frame_id",) + METRIC_NAMES + ("region",)


class UndefinedMetricError(NearToFarError):
    """AP requested with no positive ground-truth pixel."""


@dataclass(frozen=True)
class ConfusionCounts:
    """Counts for the obstacle class; the free-space counts are its mirror."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def for_class(self, cls: int) -> tuple[int, int, int, int]:
        if cls == OBSTACLE:
            return self.tp, self.fp, self.fn, self.tn
        return self.tn, self.fn, self.fp, self.tp

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def _pred_labels(pred):
    return np.asarray(getattr(pred, "labels", pred))


def _eval_mask(gt, region_mask):
    mask = (gt == FREE) | (gt == OBSTACLE)
    if region_mask is not None:
        region_mask = np.asarray(region_mask, dtype=bool)
        if region_mask.shape != gt.shape:
            raise InvalidInputError(f"region mask {region_mask.shape} != gt {gt.shape}")
        mask &= region_mask
    return mask


def confusion(pred, gt, region_mask=None) -> ConfusionCounts:
    """Pixel counts over known GT pixels inside ``region_mask``."""
    p = _pred_labels(pred)
    gt = np.asarray(gt)
    if p.shape != gt.shape:
        raise InvalidInputError(f"prediction {p.shape} and ground truth {gt.shape} differ in size")
    mask = _eval_mask(gt, region_mask)
    po = p[mask] == OBSTACLE
    go = gt[mask] == OBSTACLE
    return ConfusionCounts(
        tp=int(np.count_nonzero(po & go)),
        fp=int(np.count_nonzero(po & ~go)),
        fn=int(np.count_nonzero(~po & go)),
        tn=int(np.count_nonzero(~po & ~go)),
    )


def iou(counts: ConfusionCounts) -> dict:
    """Per-class IoU and their mean over classes with support (NaN if none)."""
    out = {}
    for name, cls in (("free", FREE), ("obstacle", OBSTACLE)):
        tp, fp, fn, _ = counts.for_class(cls)
        denom = tp + fp + fn
        out[name] = tp / denom if denom else math.nan
    supported = [v for v in (out["free"], out["obstacle"]) if not math.isnan(v)]
    out["mean"] = sum(supported) / len(supported) if supported else math.nan
    return out


def pixel_accuracy(counts: ConfusionCounts) -> float:
    return (counts.tp + counts.tn) / counts.total if counts.total else math.nan


def average_precision(confidences, gt, region_mask=None) -> float:
    """Non-interpolated pixel-level AP of the obstacle class.

    Pixels are ranked by descending confidence, ties by ascending flat
    index; AP = sum over ranks k holding a positive of precision@k / #pos.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    gt = np.asarray(gt)
    if conf.shape != gt.shape:
        raise InvalidInputError(f"confidences {conf.shape} and ground truth {gt.shape} differ in size")
    mask = _eval_mask(gt, region_mask).ravel()
    scores = conf.ravel()[mask]
    positive = gt.ravel()[mask] == OBSTACLE
    n_pos = int(np.count_nonzero(positive))
    if n_pos == 0:
        raise UndefinedMetricError("no positive (obstacle) ground-truth pixels")
    order = np.argsort(-scores, kind="stable")
    hits = positive[order]
    ranks = np.flatnonzero(hits) + 1
    precision_at_hits = np.arange(1, n_pos + 1) / ranks
    return float(precision_at_hits.sum() / n_pos)


def far_field_mask(depth, max_range: float = DEFAULT_MAX_RANGE) -> np.ndarray:
    """Pixels without usable depth: the region only appearance can label."""
    return ~valid_depth_mask(depth, max_range)


def frame_metrics(pred, gt, region_mask=None, confidences=None) -> dict:
    """Metric dict (METRIC_NAMES) for one frame; undefined values are NaN."""
    counts = confusion(pred, gt, region_mask)
    ious = iou(counts)
    if confidences is None:
        confidences = getattr(pred, "confidence", None)
    if confidences is None:
        confidences = (_pred_labels(pred) == OBSTACLE).astype(np.float64)
    try:
        ap = average_precision(confidences, gt, region_mask)
    except UndefinedMetricError:
        ap = math.nan
    return {
        "iou_free": ious["free"],
        "iou_obstacle": ious["obstacle"],
        "miou": ious["mean"],
        "ap": ap,
        "accuracy": pixel_accuracy(counts),
    }


def _nanmean(values):
    vals = [v for v in values if not math.isnan(v)]
    return sum(vals) / len(vals) if vals else math.nan


@dataclass
class MetricReport:
    """Per-frame metric series for one region ('all' or 'far')."""

    region: str = "all"
    frame_ids: list = field(default_factory=list)
    rows: list = field(default_factory=list)

    def add(self, frame_id: int, metrics: dict) -> None:
        self.frame_ids.append(int(frame_id))
        self.rows.append({k: float(metrics[k]) for k in METRIC_NAMES})

    def series(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def aggregate(self, frames=None) -> dict:
        """NaN-skipping mean of each metric, optionally over a frame-id subset."""
        keep = None if frames is None else set(frames)
        rows = [r for fid, r in zip(self.frame_ids, self.rows) if keep is None or fid in keep]
        return {k: _nanmean([r[k] for r in rows]) for k in METRIC_NAMES}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for fid, row in zip(self.frame_ids, self.rows):
            w.writerow([fid] + [_fmt(row[k]) for k in METRIC_NAMES] + [self.region])
        agg = self.aggregate()
        w.writerow(["mean"] + [_fmt(agg[k]) for k in METRIC_NAMES] + [self.region])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise InvalidInputError(f"unexpected metrics header {reader.fieldnames}")
        report = None
        for row in reader:
            if report is None:
                report = cls(region=row["region"])
            if row["frame_id"] == "mean":
                continue
            report.add(int(row["frame_id"]), {k: float(row[k]) for k in METRIC_NAMES})
        return report or cls()


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def _delta(a: float, b: float) -> float:
    # undefined in both runs counts as no difference
    if math.isnan(a) and math.isnan(b):
        return 0.0
    return a - b


@dataclass
class Comparison:
    region: str
    frame_ids: list
    a: MetricReport
    b: MetricReport

    def deltas(self) -> list[dict]:
        return [{k: _delta(ra[k], rb[k]) for k in METRIC_NAMES} for ra, rb in zip(self.a.rows, self.b.rows)]

    def aggregate_delta(self) -> dict:
        agg_a, agg_b = self.a.aggregate(), self.b.aggregate()
        return {k: _delta(agg_a[k], agg_b[k]) for k in METRIC_NAMES}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["frame_id"]
        for k in METRIC_NAMES:
            header += [f"{k}_a", f"{k}_b", f"{k}_delta"]
        w.writerow(header + ["region"])
        agg_a, agg_b, agg_d = self.a.aggregate(), self.b.aggregate(), self.aggregate_delta()
        rows = list(zip(self.frame_ids, self.a.rows, self.b.rows, self.deltas()))
        rows.append(("mean", agg_a, agg_b, agg_d))
        for fid, ra, rb, d in rows:
            line = [fid]
            for k in METRIC_NAMES:
                line += [_fmt(ra[k]), _fmt(rb[k]), _fmt(d[k])]
            w.writerow(line + [self.region])
        return buf.getvalue()

    def summary(self, label_a="A", label_b="B") -> str:
        agg_a, agg_b, agg_d = self.a.aggregate(), self.b.aggregate(), self.aggregate_delta()
        lines = [f"region={self.region} frames={len(self.frame_ids)}",
                 f"{'metric':<14}{label_a:>12}{label_b:>12}{'delta':>12}"]
        for k in METRIC_NAMES:
            lines.append(f"{k:<14}{agg_a[k]:>12.4f}{agg_b[k]:>12.4f}{agg_d[k]:>+12.4f}")
        return "\n".join(lines)


def compare_runs(report_a: MetricReport, report_b: MetricReport) -> Comparison:
    if report_a.region != report_b.region:
        raise InvalidInputError(f"region mismatch: {report_a.region} vs {report_b.region}")
    if report_a.frame_ids != report_b.frame_ids:
        missing = sorted(set(report_a.frame_ids) ^ set(report_b.frame_ids))
        raise InvalidInputError(f"frame sets differ (symmetric difference: {missing[:20]})")
    return Comparison(report_a.region, list(report_a.frame_ids), report_a, report_b)
