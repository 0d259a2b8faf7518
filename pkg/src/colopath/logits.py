"""The N x C logit table passed from training to calibration and evaluation."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class LogitMatrix:
    values: np.ndarray
    labels: np.ndarray
    sample_ids: list[str]
    video_ids: list[str | None]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ValueError(f"logits must be a non-empty N x C matrix, got shape {self.values.shape}")
        n, c = self.values.shape
        if self.labels.shape != (n,):
            raise ValueError(f"expected {n} labels, got {self.labels.shape}")
        if len(self.sample_ids) != n or len(self.video_ids) != n:
            raise ValueError("sample_ids and video_ids must have one entry per row")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("logits contain non-finite values")
        if self.labels.min() < 0 or self.labels.max() >= c:
            raise ValueError(f"labels must lie in [0, {c})")

    @classmethod
    def from_arrays(cls, values, labels, sample_ids=None, video_ids=None) -> "LogitMatrix":
        n = len(labels)
        if sample_ids is None:
            sample_ids = [str(i) for i in range(n)]
        if video_ids is None:
            video_ids = [None] * n
        return cls(values, labels, list(sample_ids), list(video_ids))

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]

    def to_csv(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["sample_id", "video_id", "label"] + [f"logit_{c}" for c in range(self.num_classes)])
            for sid, vid, lab, row in zip(self.sample_ids, self.video_ids, self.labels, self.values):
                w.writerow([sid, "" if vid is None else vid, int(lab)] + [repr(float(v)) for v in row])
        return path

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "LogitMatrix":
        path = Path(path)
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None or header[:3] != ["sample_id", "video_id", "label"]:
                raise ValueError(f"bad logit CSV header in {path}")
            rows = list(reader)
        if not rows:
            raise ValueError(f"no rows in {path}")
        return cls(
            values=np.array([[float(v) for v in r[3:]] for r in rows]),
            labels=np.array([int(r[2]) for r in rows]),
            sample_ids=[r[0] for r in rows],
            video_ids=[r[1] or None for r in rows],
        )
