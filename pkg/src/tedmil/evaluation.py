"""Frame-level scoring, ROC/AUC and false-alarm rate."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .data import load_annotations, load_bags, load_manifest, segment_index
from .errors import ContractError, ValidationError
from .network import predict


def expand_scores(instance_scores, n_frames: int, n_clips: Optional[int] = None) -> np.ndarray:
    """Spread instance scores over frames.

    Without ``n_clips``, frame f takes the score of instance
    ``floor(f * n_instances / n_frames)``. With ``n_clips``, frame f first maps
    to its clip ``floor(f * n_clips / n_frames)`` and then to the instance that
    clip was averaged into, so the frame partition agrees with the bag exactly
    even when the clip count is not a multiple of the instance count.
    """
    s = np.asarray(instance_scores, dtype=float).reshape(-1)
    if n_frames < 1:
        raise ContractError(f"n_frames must be >= 1, got {n_frames}")
    if n_clips is None:
        return s[segment_index(n_frames, s.size)]
    if n_clips < 1:
        raise ContractError(f"n_clips must be >= 1, got {n_clips}")
    clip = segment_index(n_frames, n_clips)
    return s[segment_index(n_clips, s.size)[clip]]


@dataclass
class ScoredVideo:
    video_id: str
    instance_scores: np.ndarray
    frame_scores: np.ndarray
    mask: np.ndarray


@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc_auc(scores, labels) -> RocCurve:
    """ROC over the sorted unique scores, AUC by the trapezoidal rule.

    Point k uses threshold ``thresholds[k]`` with rule ``score >= threshold``;
    the first point uses +inf and yields (0, 0).
    """
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=bool).reshape(-1)
    if s.shape != y.shape:
        raise ContractError(f"{s.size} scores for {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("ROC needs at least one positive and one negative frame")

    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s[ends]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, fpr, tpr, auc)


def false_alarm_rate(frame_scores, threshold: float = 0.5) -> float:
    """Fraction of (normal-video) frames scoring at or above ``threshold``."""
    s = np.asarray(frame_scores, dtype=float).reshape(-1)
    if s.size == 0:
        raise ContractError("false_alarm_rate needs at least one frame")
    return float(np.mean(s >= threshold))


@dataclass
class EvalReport:
    auc: float
    false_alarm: float
    n_frames: int
    n_videos: int
    roc: RocCurve
    videos: list
    per_video_auc: Optional[dict] = None


def score_bags(params, bags, annotations: dict) -> list:
    missing = [b.video_id for b in bags if b.video_id not in annotations]
    if missing:
        raise ValidationError(f"no annotation for test video {missing[0]}")
    if not bags:
        return []
    inst = predict(params, np.stack([b.instances for b in bags]))
    scored = []
    for b, s in zip(bags, inst):
        rec = annotations[b.video_id]
        if rec.n_frames != b.n_frames:
            raise ValidationError(
                f"{b.video_id}: manifest says {b.n_frames} frames, annotation says {rec.n_frames}"
            )
        scored.append(ScoredVideo(b.video_id, s, expand_scores(s, b.n_frames, b.n_clips or None), rec.frame_mask()))
    return scored


def summarize(scored: list, labels: dict, threshold: float = 0.5, per_video: bool = False) -> EvalReport:
    scores = np.concatenate([v.frame_scores for v in scored])
    mask = np.concatenate([v.mask for v in scored])
    roc = roc_auc(scores, mask)
    normal = [v.frame_scores for v in scored if labels[v.video_id] == "normal"]
    fa = false_alarm_rate(np.concatenate(normal), threshold) if normal else float("nan")
    pv = None
    if per_video:
        pv = {v.video_id: roc_auc(v.frame_scores, v.mask).auc for v in scored if 0 < v.mask.sum() < v.mask.size}
    return EvalReport(roc.auc, fa, int(scores.size), len(scored), roc, scored, pv)


def evaluate(params, manifest, annotations_path=None, split: str = "test", threshold: float = 0.5,
             per_video: bool = False, normalize: str = "after") -> EvalReport:
    """Score every ``split`` video of a manifest and pool frames into one ROC.

    ``annotations_path`` defaults to ``annotations.csv`` next to the manifest.
    """
    manifest = Path(manifest)
    entries, _ = load_manifest(manifest)
    entries = [e for e in entries if e.split == split]
    if not entries:
        raise ValidationError(f"{manifest}: no videos in split {split!r}")
    ann_path = Path(annotations_path) if annotations_path else manifest.parent / "annotations.csv"
    if not ann_path.is_file():
        raise ValidationError(f"annotation file {ann_path} does not exist")
    annotations = {r.video_id: r for r in load_annotations(ann_path)}
    bags = load_bags(entries, bag_size=params.config.bag_size, normalize=normalize)
    scored = score_bags(params, bags, annotations)
    return summarize(scored, {e.video_id: e.label for e in entries}, threshold, per_video)


def write_report(report: EvalReport, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        w.writerow(["auc", repr(report.auc)])
        w.writerow(["false_alarm_rate", repr(report.false_alarm)])
        w.writerow(["n_frames", report.n_frames])
        w.writerow(["n_videos", report.n_videos])
    with open(out / "roc_points.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "fpr", "tpr"])
        for row in zip(report.roc.thresholds, report.roc.fpr, report.roc.tpr):
            w.writerow([repr(float(v)) for v in row])
    with open(out / "frame_scores.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "frame", "score", "label"])
        for v in report.videos:
            for f, (s, m) in enumerate(zip(v.frame_scores, v.mask)):
                w.writerow([v.video_id, f, repr(float(s)), int(m)])
    if report.per_video_auc:
        with open(out / "per_video_auc.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["video_id", "auc"])
            for vid, auc in report.per_video_auc.items():
                w.writerow([vid, repr(auc)])
