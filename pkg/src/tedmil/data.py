"""Feature files, bags, annotations, manifests and synthetic datasets.

TEDF feature file layout (little-endian)::

    0   4 bytes  magic "TEDF"
    4   u32      format version (1)
    8   u32      n_clips
    12  u32      dim
    16  float32  n_clips * dim values, row-major (one row per 16-frame clip)

A ``.csv`` path holds the same matrix as one comma-separated row per clip.
"""
from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng as rngmod
from .errors import ContractError, FormatError, ValidationError

TEDF_MAGIC = b"TEDF"
TEDF_VERSION = 1
FRAMES_PER_CLIP = 16
BAG_SIZE = 32
LABELS = ("normal", "abnormal")


def segment_index(n_items: int, n_segments: int = BAG_SIZE) -> np.ndarray:
    """Segment of every item when ``n_items`` ordered items are cut into ``n_segments``.

    Item ``i`` belongs to segment ``floor(i * n_segments / n_items)``. Both the
    clip-to-instance averaging and the instance-to-frame score expansion use
    this function, so their boundaries agree.
    """
    if n_items < 1:
        raise ContractError(f"need at least one item to partition, got {n_items}")
    return (np.arange(n_items, dtype=np.int64) * n_segments) // n_items


def _l2_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


@dataclass
class Bag:
    instances: np.ndarray
    label: Optional[str]
    video_id: str = ""
    n_frames: int = 0
    n_clips: int = 0


def build_bag(features, label: Optional[str] = None, n_frames: Optional[int] = None, video_id: str = "",
              n_segments: int = BAG_SIZE, normalize: str = "after") -> Bag:
    """Average clip features into ``n_segments`` ordered instances.

    ``normalize="after"`` averages the rows of each segment and l2-normalizes the
    mean. ``"before"`` l2-normalizes every clip first, then does the same.
    Segments that receive no clip (fewer clips than segments) repeat the
    nearest preceding instance; segment 0 always holds clip 0.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ContractError(f"features must be (n_clips, d) with d >= 1, got shape {x.shape}")
    if label is not None and label not in LABELS:
        raise ContractError(f"label must be one of {LABELS}, got {label!r}")
    if normalize not in ("after", "before"):
        raise ContractError(f"normalize must be 'after' or 'before', got {normalize!r}")
    n = x.shape[0]
    if normalize == "before":
        x = _l2_rows(x)

    seg = segment_index(n, n_segments)
    sums = np.zeros((n_segments, x.shape[1]))
    np.add.at(sums, seg, x)
    counts = np.bincount(seg, minlength=n_segments)
    inst = np.zeros_like(sums)
    filled = counts > 0
    inst[filled] = sums[filled] / counts[filled, None]
    for j in range(1, n_segments):
        if not filled[j]:
            inst[j] = inst[j - 1]
    inst = _l2_rows(inst)
    return Bag(inst, label, video_id, n_frames if n_frames is not None else FRAMES_PER_CLIP * n, n)


# ---------------------------------------------------------------------------
# feature files


@dataclass
class FeatureFile:
    video_id: str
    matrix: np.ndarray

    @property
    def n_clips(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def write_feature_file(path, matrix):
    path = Path(path)
    m = np.asarray(matrix, dtype="<f4")
    if m.ndim != 2 or min(m.shape) < 1:
        raise ContractError(f"feature matrix must be (n_clips >= 1, dim >= 1), got {m.shape}")
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in m:
                w.writerow([repr(float(v)) for v in row])
    else:
        with open(path, "wb") as fh:
            fh.write(TEDF_MAGIC + struct.pack("<III", TEDF_VERSION, *m.shape) + m.tobytes())


def load_feature_file(path) -> FeatureFile:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        m = _read_feature_csv(path)
    else:
        m = _read_tedf(path)
    bad = np.abs(np.linalg.norm(m, axis=1) - 1.0) > 1e-3
    if bad.any():
        warnings.warn(f"{path}: {int(bad.sum())} of {len(m)} clip rows are not unit-l2", stacklevel=2)
    return FeatureFile(path.stem, m)


def _read_tedf(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: header truncated, expected 16 bytes, got {len(raw)}", offset=len(raw))
    if raw[:4] != TEDF_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {TEDF_MAGIC!r}", offset=0)
    version, n, d = struct.unpack_from("<III", raw, 4)
    if version != TEDF_VERSION:
        raise FormatError(f"{path}: unsupported TEDF version {version}", offset=4)
    if n < 1 or d < 1:
        raise FormatError(f"{path}: empty matrix ({n} clips x {d} dims)", offset=8)
    expected = 16 + 4 * n * d
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "has trailing data"
        raise FormatError(f"{path}: payload {kind}: expected {expected} bytes, got {len(raw)}",
                          offset=min(len(raw), expected))
    m = np.frombuffer(raw, dtype="<f4", offset=16).reshape(n, d)
    bad = np.flatnonzero(~np.isfinite(m))
    if bad.size:
        raise FormatError(f"{path}: non-finite value at clip {bad[0] // d}, dim {bad[0] % d}",
                          offset=16 + 4 * int(bad[0]))
    return m.astype(np.float64)


def _read_feature_csv(path: Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise FormatError(f"{path}: line {lineno} is not numeric") from None
    if not rows:
        raise FormatError(f"{path}: no clip rows")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise FormatError(f"{path}: ragged rows with widths {sorted(widths)}")
    m = np.asarray(rows, dtype=np.float64).astype(np.float32)
    if not np.all(np.isfinite(m)):
        raise FormatError(f"{path}: non-finite value")
    return m.astype(np.float64)


# ---------------------------------------------------------------------------
# annotations


@dataclass
class AnnotationRecord:
    video_id: str
    label: str
    n_frames: int
    intervals: list = field(default_factory=list)

    def frame_mask(self, n_frames: Optional[int] = None) -> np.ndarray:
        mask = np.zeros(n_frames or self.n_frames, dtype=bool)
        for start, end in self.intervals:
            mask[start:end] = True
        return mask


def validate_record(rec: AnnotationRecord, where: str = ""):
    prefix = f"{where}: " if where else ""
    if rec.label not in LABELS:
        raise ValidationError(f"{prefix}label must be one of {LABELS}, got {rec.label!r}")
    if rec.n_frames < 1:
        raise ValidationError(f"{prefix}n_frames must be >= 1, got {rec.n_frames}")
    if rec.label == "normal" and rec.intervals:
        raise ValidationError(f"{prefix}normal video {rec.video_id} must not have anomaly intervals")
    prev_end = 0
    for start, end in rec.intervals:
        if not 0 <= start < end <= rec.n_frames:
            raise ValidationError(
                f"{prefix}interval [{start}, {end}) of {rec.video_id} is out of range for {rec.n_frames} frames"
            )
        if start < prev_end:
            raise ValidationError(f"{prefix}interval [{start}, {end}) of {rec.video_id} overlaps or is unsorted")
        prev_end = end


def load_annotations(path) -> list:
    """Parse ``video_id,label,n_frames[,start,end]...`` rows; (-1, -1) pairs are skipped."""
    records = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            row = [c.strip() for c in row]
            if not row or not row[0] or row[0].startswith("#") or row[0] == "video_id":
                continue
            where = f"{path} row {lineno}"
            if len(row) < 3 or (len(row) - 3) % 2:
                raise ValidationError(f"{where}: expected video_id,label,n_frames then start,end pairs")
            try:
                nums = [int(v) for v in row[2:]]
            except ValueError:
                raise ValidationError(f"{where}: frame numbers must be integers") from None
            pairs = [(s, e) for s, e in zip(nums[1::2], nums[2::2]) if (s, e) != (-1, -1)]
            rec = AnnotationRecord(row[0], row[1], nums[0], pairs)
            validate_record(rec, where)
            records.append(rec)
    return records


def write_annotations(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for rec in records:
            w.writerow([rec.video_id, rec.label, rec.n_frames] + [v for iv in rec.intervals for v in iv])


# ---------------------------------------------------------------------------
# manifests

MANIFEST_COLUMNS = ("video_id", "split", "label", "feature_path", "n_frames")


@dataclass
class ManifestEntry:
    video_id: str
    split: str
    label: str
    feature_path: Path
    n_frames: int


def write_manifest(path, entries, meta: Optional[dict] = None):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        for key, value in (meta or {}).items():
            fh.write(f"# {key}={value}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in entries:
            fp = Path(e.feature_path)
            try:
                fp = fp.relative_to(path.parent)
            except ValueError:
                pass
            w.writerow([e.video_id, e.split, e.label, fp.as_posix(), e.n_frames])


def load_manifest(path):
    """Return ``(entries, meta)``; relative feature paths resolve against the manifest's folder."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest {path} does not exist")
    meta, entries = {}, []
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    reader = csv.DictReader(body)
    if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
        raise ValidationError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}")
    for i, row in enumerate(reader, 2):
        if row["label"] not in LABELS:
            raise ValidationError(f"{path} row {i}: bad label {row['label']!r}")
        fp = Path(row["feature_path"])
        if not fp.is_absolute():
            fp = path.parent / fp
        entries.append(ManifestEntry(row["video_id"], row["split"], row["label"], fp, int(row["n_frames"])))
    return entries, meta


def load_bags(entries, split: Optional[str] = None, bag_size: int = BAG_SIZE, normalize: str = "after") -> list:
    bags = []
    for e in entries:
        if split is not None and e.split != split:
            continue
        ff = load_feature_file(e.feature_path)
        bags.append(build_bag(ff.matrix, e.label, e.n_frames, e.video_id, bag_size, normalize))
    return bags


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    """Gaussian clip features around a normal mean, with one planted run per abnormal video.

    The planted run adds ``anomaly_offset_scale`` times a fixed random unit
    direction to its clips before l2 normalization. Zero offset gives a null
    control: abnormal and normal videos are identically distributed.
    """

    dim: int = 32
    n_train_normal: int = 60
    n_train_abnormal: int = 60
    n_test: int = 20
    clips_min: int = 32
    clips_max: int = 64
    anomaly_min: int = 24
    anomaly_max: int = 48
    normal_mean_norm: float = 1.0
    normal_scale: float = 0.05
    anomaly_offset_scale: float = 1.5
    seed: int = 0

    def __post_init__(self):
        for name in ("dim", "n_train_normal", "n_train_abnormal", "n_test", "clips_min", "anomaly_min"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.clips_max < self.clips_min:
            raise ValidationError("clips_max must be >= clips_min")
        if self.anomaly_max < self.anomaly_min:
            raise ValidationError("anomaly_max must be >= anomaly_min")
        if self.normal_scale <= 0 or self.normal_mean_norm < 0:
            raise ValidationError("normal_scale must be > 0 and normal_mean_norm >= 0")
        if self.anomaly_offset_scale < 0:
            raise ValidationError("anomaly_offset_scale must be >= 0")

    @property
    def null_signal(self) -> bool:
        return self.anomaly_offset_scale == 0


@dataclass
class SyntheticVideo:
    video_id: str
    split: str
    label: str
    features: np.ndarray
    annotation: AnnotationRecord


def make_synthetic(spec: SyntheticSpec) -> list:
    """In-memory synthetic videos; features are rounded to float32 as on disk."""
    rng = rngmod.stream(spec.seed, "synth")
    mean = rng.normal(size=spec.dim)
    mean *= spec.normal_mean_norm / np.linalg.norm(mean)
    offset = rng.normal(size=spec.dim)
    offset *= spec.anomaly_offset_scale / np.linalg.norm(offset)

    plan = [("train", "normal", spec.n_train_normal), ("train", "abnormal", spec.n_train_abnormal),
            ("test", "normal", spec.n_test), ("test", "abnormal", spec.n_test)]
    videos = []
    for split, label, count in plan:
        for i in range(count):
            n = int(rng.integers(spec.clips_min, spec.clips_max + 1))
            x = mean + spec.normal_scale * rng.normal(size=(n, spec.dim))
            intervals = []
            if label == "abnormal":
                length = min(int(rng.integers(spec.anomaly_min, spec.anomaly_max + 1)), n)
                start = int(rng.integers(0, n - length + 1))
                x[start:start + length] += offset
                intervals = [(FRAMES_PER_CLIP * start, FRAMES_PER_CLIP * (start + length))]
            x = _l2_rows(x).astype(np.float32).astype(np.float64)
            vid = f"{split}_{label}_{i:03d}"
            rec = AnnotationRecord(vid, label, FRAMES_PER_CLIP * n, intervals)
            videos.append(SyntheticVideo(vid, split, label, x, rec))
    return videos


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Path:
    """Write features, ``annotations.csv`` and ``manifest.csv`` under ``out_dir``; return the manifest path."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    videos = make_synthetic(spec)
    entries = []
    for v in videos:
        fp = out / "features" / f"{v.video_id}.tedf"
        write_feature_file(fp, v.features)
        entries.append(ManifestEntry(v.video_id, v.split, v.label, fp, v.annotation.n_frames))
    write_annotations(out / "annotations.csv", [v.annotation for v in videos])
    meta = {"generator": "tedmil-synthetic", "null_signal": int(spec.null_signal)}
    meta.update({k: v for k, v in asdict(spec).items()})
    manifest = out / "manifest.csv"
    write_manifest(manifest, entries, meta)
    return manifest
