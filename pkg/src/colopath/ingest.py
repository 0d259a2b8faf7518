"""Dataset manifests, 1 fps frame extraction, video-level splits and synthetic data.

A manifest is the single source of truth for which image belongs to which
split.  Histology manifests mirror the splits shipped with the data; colonoscopy
manifests are built from extracted frames and split per video so that no clip
leaks frames across splits.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MODALITIES = ("histology", "colonoscopy")
MANIFEST_HEADER = ["sample_id", "source_path", "label", "split", "video_id", "frame_time_s"]

# PathMNIST label order (index i is the tissue type stored as label i).
PATHMNIST_CLASSES = (
    "adipose",
    "background",
    "debris",
    "immune cells",
    "mucus",
    "smooth muscle",
    "epithelium",
    "connective tissue",
    "cancerous tissue",
)
COLONOSCOPY_CLASSES = ("polyp", "colitis")

NPZ_REF_SEP = "::"


class ManifestError(ValueError):
    """Raised for malformed dataset layouts or manifests."""


class VideoError(ValueError):
    """Raised when a video cannot be decoded or has no duration."""


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    source_path: str
    label: int
    split: str
    video_id: str | None = None
    frame_time_s: int | None = None

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r} for {self.sample_id}")
        if self.label < 0:
            raise ManifestError(f"negative label {self.label} for {self.sample_id}")
        if (self.video_id is None) != (self.frame_time_s is None):
            raise ManifestError(f"{self.sample_id}: frame_time_s must be set iff video_id is set")
        if self.frame_time_s is not None and self.frame_time_s < 0:
            raise ManifestError(f"{self.sample_id}: negative frame time")


@dataclass
class DatasetManifest:
    modality: str
    records: list[SampleRecord]
    class_names: list[str]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def class_counts(self, split: str = "train") -> np.ndarray:
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for r in self.split(split):
            counts[r.label] += 1
        return counts

    def video_labels(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            if r.video_id is not None:
                out.setdefault(r.video_id, r.label)
        return out

    def validate(self, require_all_train_classes: bool = True) -> None:
        if self.modality not in MODALITIES:
            raise ManifestError(f"unknown modality {self.modality!r}")
        seen: set[str] = set()
        video_split: dict[str, str] = {}
        video_label: dict[str, int] = {}
        for r in self.records:
            if r.sample_id in seen:
                raise ManifestError(f"duplicate sample_id {r.sample_id}")
            seen.add(r.sample_id)
            if r.label >= self.num_classes:
                raise ManifestError(
                    f"label {r.label} outside [0, {self.num_classes}) for {r.sample_id}"
                )
            if r.video_id is not None:
                if video_split.setdefault(r.video_id, r.split) != r.split:
                    raise ManifestError(f"video {r.video_id} spans splits")
                if video_label.setdefault(r.video_id, r.label) != r.label:
                    raise ManifestError(f"video {r.video_id} has inconsistent labels")
        if require_all_train_classes:
            missing = [self.class_names[c] for c, n in enumerate(self.class_counts()) if n == 0]
            if missing:
                raise ManifestError(f"classes absent from train split: {', '.join(missing)}")

    def to_csv(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(MANIFEST_HEADER)
            for r in self.records:
                w.writerow([
                    r.sample_id,
                    _relativize(r.source_path, base),
                    r.label,
                    r.split,
                    "" if r.video_id is None else r.video_id,
                    "" if r.frame_time_s is None else r.frame_time_s,
                ])
        meta = {"modality": self.modality, "class_names": list(self.class_names)}
        _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "DatasetManifest":
        path = Path(path)
        if not path.is_file():
            raise ManifestError(f"manifest not found: {path}")
        base = path.parent.resolve()
        records = []
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != MANIFEST_HEADER:
                raise ManifestError(f"bad manifest header in {path}: {reader.fieldnames}")
            for row in reader:
                src = row["source_path"]
                records.append(SampleRecord(
                    sample_id=row["sample_id"],
                    source_path=_absolutize(src, base),
                    label=int(row["label"]),
                    split=row["split"],
                    video_id=row["video_id"] or None,
                    frame_time_s=int(row["frame_time_s"]) if row["frame_time_s"] else None,
                ))
        meta_path = _meta_path(path)
        if meta_path.is_file():
            meta = json.loads(meta_path.read_text())
            modality, class_names = meta["modality"], list(meta["class_names"])
        else:
            modality = "colonoscopy" if any(r.video_id for r in records) else "histology"
            n = max((r.label for r in records), default=0) + 1
            class_names = [f"class_{i}" for i in range(n)]
        return cls(modality=modality, records=records, class_names=class_names)


def _meta_path(csv_path: Path) -> Path:
    return csv_path.with_name(csv_path.stem + ".meta.json")


def _relativize(source: str, base: Path) -> str:
    file_part, sep, rest = source.partition(NPZ_REF_SEP)
    p = Path(file_part)
    if p.is_absolute():
        try:
            file_part = p.resolve().relative_to(base).as_posix()
        except ValueError:
            pass
    return file_part + sep + rest


def _absolutize(source: str, base: Path) -> str:
    file_part, sep, rest = source.partition(NPZ_REF_SEP)
    p = Path(file_part)
    if not p.is_absolute():
        file_part = str(base / p)
    return file_part + sep + rest


# ---------------------------------------------------------------------------
# image access


@lru_cache(maxsize=8)
def _npz_array(npz_path: str, key: str) -> np.ndarray:
    with np.load(npz_path) as data:
        return data[key]


def load_image(source_path: str) -> np.ndarray:
    """Read one sample as an ``H x W x 3`` uint8 array.

    ``source_path`` is either an image file or an array reference of the form
    ``<file.npz>::<key>::<index>``.
    """
    if NPZ_REF_SEP in source_path:
        npz, key, idx = source_path.split(NPZ_REF_SEP)
        img = np.asarray(_npz_array(npz, key)[int(idx)])
    else:
        with Image.open(source_path) as im:
            img = np.asarray(im.convert("RGB"))
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return np.ascontiguousarray(img, dtype=np.uint8)


def save_png(img: np.ndarray, path: str | os.PathLike) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# histology


def build_histology_manifest(
    root: str | os.PathLike, class_names: Sequence[str] = PATHMNIST_CLASSES
) -> DatasetManifest:
    """Index a histology patch collection without re-splitting it.

    Two layouts are understood.  The archive layout is a single ``.npz`` in
    ``root`` holding ``{split}_images`` / ``{split}_labels`` arrays (how
    PathMNIST is distributed).  The directory layout has ``root/{split}/``
    folders of images, each with a ``labels.csv`` of ``filename,label`` rows.
    """
    root = Path(root)
    class_names = list(class_names)
    npz = _find_split_archive(root)
    records: list[SampleRecord] = []
    for split in SPLITS:
        if npz is not None:
            records.extend(_records_from_npz(npz, split))
        else:
            records.extend(_records_from_dir(root / split, split))
    manifest = DatasetManifest("histology", records, class_names)
    for r in records:
        if r.label >= len(class_names):
            raise ManifestError(
                f"label {r.label} outside [0, {len(class_names)}) for {r.sample_id}"
            )
    manifest.validate(require_all_train_classes=False)
    return manifest


def _find_split_archive(root: Path) -> Path | None:
    if not root.is_dir():
        return None
    candidates = sorted(root.glob("*.npz"))
    preferred = [p for p in candidates if p.name.startswith("pathmnist")]
    for p in preferred + candidates:
        with np.load(p) as data:
            if "train_images" in data.files:
                return p
    return None


def _records_from_npz(npz: Path, split: str) -> list[SampleRecord]:
    with np.load(npz) as data:
        if f"{split}_images" not in data.files or f"{split}_labels" not in data.files:
            raise ManifestError(f"missing split: {split}")
        n_images = data[f"{split}_images"].shape[0]
        labels = np.asarray(data[f"{split}_labels"]).reshape(-1)
    if labels.shape[0] != n_images:
        raise ManifestError(f"split {split}: {n_images} images but {labels.shape[0]} labels")
    src = str(npz.resolve())
    return [
        SampleRecord(
            sample_id=f"{split}_{i:06d}",
            source_path=NPZ_REF_SEP.join([src, f"{split}_images", str(i)]),
            label=int(lab),
            split=split,
        )
        for i, lab in enumerate(labels)
    ]


def _records_from_dir(split_dir: Path, split: str) -> list[SampleRecord]:
    labels_csv = split_dir / "labels.csv"
    if not labels_csv.is_file():
        raise ManifestError(f"missing split: {split}")
    records = []
    with open(labels_csv, newline="") as f:
        for row in csv.DictReader(f):
            image = split_dir / row["filename"]
            if not image.is_file():
                raise ManifestError(f"split {split}: listed image missing: {image}")
            records.append(SampleRecord(
                sample_id=Path(row["filename"]).stem,
                source_path=str(image.resolve()),
                label=int(row["label"]),
                split=split,
            ))
    return records


# ---------------------------------------------------------------------------
# colonoscopy


def extract_frames(
    video_path: str | os.PathLike,
    out_dir: str | os.PathLike,
    label: int = 0,
) -> list[SampleRecord]:
    """Write one PNG per integer second of ``video_path``.

    For each ``t`` in ``0 .. ceil(duration) - 1`` the decoded frame whose
    timestamp is closest to ``t`` is kept (earlier frame on exact ties).
    Records are placed in the train split until :func:`split_videos` assigns
    their real split.
    """
    import cv2

    video_path = Path(video_path)
    video_id = video_path.stem
    cap = cv2.VideoCapture(str(video_path))
    if not cap.isOpened():
        raise VideoError(f"cannot decode video: {video_path}")
    fps = cap.get(cv2.CAP_PROP_FPS)
    frame_dir = Path(out_dir) / video_id
    frame_dir.mkdir(parents=True, exist_ok=True)

    records: list[SampleRecord] = []

    def emit(t: int, frame_bgr: np.ndarray) -> None:
        sample_id = f"{video_id}_t{t:05d}"
        path = frame_dir / f"{sample_id}.png"
        save_png(frame_bgr[..., ::-1], path)
        records.append(SampleRecord(sample_id, str(path.resolve()), label, "train", video_id, t))

    target = 0
    prev: tuple[float, np.ndarray] | None = None
    last_ts = -math.inf
    n = 0
    try:
        while True:
            ok, frame = cap.read()
            if not ok:
                break
            ts = cap.get(cv2.CAP_PROP_POS_MSEC) / 1000.0
            if not (ts > last_ts) and fps > 0:
                ts = n / fps
            last_ts = ts
            n += 1
            while ts >= target:
                if prev is not None and (target - prev[0]) <= (ts - target):
                    emit(target, prev[1])
                else:
                    emit(target, frame)
                target += 1
            prev = (ts, frame)
    finally:
        cap.release()

    if n == 0:
        raise VideoError(f"zero-duration video (no decodable frames): {video_path}")
    frame_len = 1.0 / fps if fps > 0 else 0.0
    duration = last_ts + frame_len
    if duration <= 0:
        raise VideoError(f"zero-duration video: {video_path}")
    # trailing seconds past the last frame timestamp all map to the last frame
    total = math.ceil(round(duration, 9))
    while target < total:
        emit(target, prev[1])
        target += 1
    del records[total:]
    return records


def split_videos(
    records: Iterable[SampleRecord],
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
    class_names: Sequence[str] = COLONOSCOPY_CLASSES,
) -> DatasetManifest:
    """Assign whole videos to train/val/test, stratified by class."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ManifestError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    records = list(records)
    by_video: dict[str, list[SampleRecord]] = defaultdict(list)
    for r in records:
        if r.video_id is None:
            raise ManifestError(f"{r.sample_id} has no video_id")
        by_video[r.video_id].append(r)

    videos_by_class: dict[int, list[str]] = defaultdict(list)
    for vid, frames in by_video.items():
        labels = {f.label for f in frames}
        if len(labels) != 1:
            raise ManifestError(f"video {vid} has frames with labels {sorted(labels)}")
        videos_by_class[labels.pop()].append(vid)

    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    for label in range(len(class_names)):
        vids = sorted(videos_by_class.get(label, []))
        name = class_names[label]
        counts = _allocate(len(vids), ratios, name)
        order = rng.permutation(len(vids))
        shuffled = [vids[i] for i in order]
        start = 0
        for split, k in zip(SPLITS, counts):
            for vid in shuffled[start:start + k]:
                assignment[vid] = split
            start += k
    stray = set(videos_by_class) - set(range(len(class_names)))
    if stray:
        raise ManifestError(f"labels {sorted(stray)} outside [0, {len(class_names)})")

    out = [
        replace(r, split=assignment[r.video_id])
        for r in sorted(records, key=lambda r: (r.video_id, r.frame_time_s, r.sample_id))
    ]
    manifest = DatasetManifest("colonoscopy", out, list(class_names))
    manifest.validate(require_all_train_classes=False)
    return manifest


def _allocate(n: int, ratios: tuple[float, float, float], class_name: str) -> list[int]:
    """Largest-remainder allocation of ``n`` videos with >= 1 per used split."""
    needed = sum(1 for r in ratios if r > 0)
    if n < needed:
        raise ManifestError(
            f"class {class_name!r} has {n} video(s) but {needed} splits require at least one"
        )
    exact = [n * r for r in ratios]
    counts = [math.floor(x) for x in exact]
    remainders = sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in remainders[: n - sum(counts)]:
        counts[i] += 1
    for i in range(3):
        if ratios[i] > 0 and counts[i] == 0:
            donor = max(range(3), key=lambda j: (counts[j], -j))
            counts[donor] -= 1
            counts[i] += 1
    return counts


# ---------------------------------------------------------------------------
# synthetic data

_PALETTE = np.array([
    [0.95, 0.15, 0.15],
    [0.15, 0.90, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.90, 0.15],
    [0.90, 0.20, 0.90],
    [0.15, 0.90, 0.90],
    [0.95, 0.55, 0.10],
    [0.60, 0.95, 0.60],
])
_BACKGROUND = 0.1


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-pattern dataset: class ``c`` is a square of colour ``c`` in quadrant ``c % 4``.

    ``frames_per_video`` switches to a colonoscopy-style layout where
    consecutive samples of one class are grouped into pseudo-videos.
    """

    num_classes: int = 4
    samples_per_class: tuple[int, int, int] = (40, 8, 8)
    image_side: int = 64
    noise_std: float = 0.05
    square_frac: float = 0.5
    frames_per_video: int | None = None
    class_names: tuple[str, ...] | None = field(default=None)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_classes > len(_PALETTE):
            raise ValueError(f"at most {len(_PALETTE)} classes supported")
        if self.image_side < 28:
            raise ValueError("image_side must be >= 28")
        if len(self.samples_per_class) != 3 or min(self.samples_per_class) < 0:
            raise ValueError("samples_per_class needs three non-negative counts")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0 < self.square_frac <= 1:
            raise ValueError("square_frac must be in (0, 1]")
        if self.frames_per_video is not None and self.frames_per_video < 1:
            raise ValueError("frames_per_video must be >= 1")

    @property
    def names(self) -> list[str]:
        if self.class_names is not None:
            return list(self.class_names)
        return [f"class_{c}" for c in range(self.num_classes)]

    @property
    def modality(self) -> str:
        return "histology" if self.frames_per_video is None else "colonoscopy"


def quadrant_bounds(quadrant: int, side: int) -> tuple[slice, slice]:
    """Row/column slices of quadrant 0 (top-left), 1 (top-right), 2, 3 (bottom-right)."""
    half = side // 2
    rows = slice(0, half) if quadrant < 2 else slice(half, side)
    cols = slice(0, half) if quadrant % 2 == 0 else slice(half, side)
    return rows, cols


def render_synthetic(label: int, spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    side = spec.image_side
    img = np.full((side, side, 3), _BACKGROUND)
    rows, cols = quadrant_bounds(label % 4, side)
    q_h, q_w = rows.stop - rows.start, cols.stop - cols.start
    sq = max(1, int(round(min(q_h, q_w) * spec.square_frac)))
    r0 = rows.start + int(rng.integers(0, q_h - sq + 1))
    c0 = cols.start + int(rng.integers(0, q_w - sq + 1))
    img[r0:r0 + sq, c0:c0 + sq] = _PALETTE[label]
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def generate_synthetic(
    spec: SyntheticSpec, seed: int, out_dir: str | os.PathLike
) -> DatasetManifest:
    """Write a planted-pattern dataset to ``out_dir`` and return its manifest.

    Layout: ``out_dir/{split}/{sample_id}.png`` with ``labels.csv`` per split
    (readable by :func:`build_histology_manifest`) plus ``manifest.csv``.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ManifestError(f"output directory not writable: {out_dir}") from e
    if not os.access(out_dir, os.W_OK):
        raise ManifestError(f"output directory not writable: {out_dir}")

    rng = np.random.default_rng(seed)
    fpv = spec.frames_per_video
    records: list[SampleRecord] = []
    for split, per_class in zip(SPLITS, spec.samples_per_class):
        split_dir = out_dir / split
        split_dir.mkdir(exist_ok=True)
        rows = []
        for label in range(spec.num_classes):
            for i in range(per_class):
                sample_id = f"{split}-c{label}-{i:05d}"
                fname = f"{sample_id}.png"
                save_png(render_synthetic(label, spec, rng), split_dir / fname)
                rows.append((fname, label))
                video_id = t = None
                if fpv is not None:
                    video_id = f"{split}-c{label}-v{i // fpv:04d}"
                    t = i % fpv
                records.append(SampleRecord(
                    sample_id, str((split_dir / fname).resolve()), label, split, video_id, t
                ))
        with open(split_dir / "labels.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["filename", "label"])
            w.writerows(rows)

    manifest = DatasetManifest(spec.modality, records, spec.names)
    manifest.validate(require_all_train_classes=False)
    manifest.to_csv(out_dir / "manifest.csv")
    return manifest


def quadrant_oracle(img: np.ndarray) -> int:
    """Index of the quadrant with the highest mean intensity."""
    side = min(img.shape[:2])
    means = []
    for q in range(4):
        rows, cols = quadrant_bounds(q, side)
        means.append(float(np.mean(img[rows, cols], dtype=np.float64)))
    return int(np.argmax(means))


def summarize(manifest: DatasetManifest) -> dict:
    counts = Counter((r.split, r.label) for r in manifest.records)
    videos = defaultdict(set)
    for r in manifest.records:
        if r.video_id is not None:
            videos[r.split].add(r.video_id)
    return {
        "modality": manifest.modality,
        "class_names": manifest.class_names,
        "samples": {s: {manifest.class_names[c]: counts[(s, c)] for c in range(manifest.num_classes)} for s in SPLITS},
        "videos": {s: len(videos[s]) for s in SPLITS},
    }
