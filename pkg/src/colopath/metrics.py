"""Classification metrics, one-vs-rest AUC and frame-to-video aggregation."""

from __future__ import annotations

import csv
import json
import logging
import os
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

AGGREGATION_RULES = ("majority", "mean")
VIDEOS_HEADER = ["video_id", "truth", "predicted", "vote_fraction", "mean_confidence", "band", "correct"]


@dataclass
class ClassStats:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    macro_auc: float | None
    weighted_ovr_auc: float | None
    confusion: list[list[int]]
    per_class: list[ClassStats]
    per_class_auc: list[float | None] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney ``U / (n_pos * n_neg)`` with midranks for ties."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_matrix(labels: np.ndarray, preds: np.ndarray, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _safe_div(a: float, b: float) -> float:
    return float(a / b) if b else 0.0


def classification_report(scores, labels) -> MetricsReport:
    """Accuracy, per-class and macro F1, one-vs-rest AUCs and confusion matrix.

    ``scores`` may be probabilities or logits; predictions are row argmaxes
    and AUCs rank the given per-class columns directly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] < 1 or scores.shape[1] < 2:
        raise ValueError(f"scores must be N x C with N >= 1 and C >= 2, got {scores.shape}")
    n, c = scores.shape
    preds = scores.argmax(axis=1)
    cm = confusion_matrix(labels, preds, c)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    tp = np.diag(cm)

    per_class = []
    for k in range(c):
        p = _safe_div(tp[k], predicted[k])
        r = _safe_div(tp[k], support[k])
        per_class.append(ClassStats(p, r, _safe_div(2 * p * r, p + r), int(support[k])))
    present = [k for k in range(c) if support[k] > 0 or predicted[k] > 0]
    macro_f1 = float(np.mean([per_class[k].f1 for k in present]))

    notes: list[str] = []
    per_class_auc: list[float | None] = [None] * c
    if np.unique(labels).size < 2:
        notes.append("labels contain a single class; AUC undefined")
    else:
        for k in range(c):
            if support[k] == 0:
                notes.append(f"class {k} absent from labels; excluded from AUC averages")
                continue
            per_class_auc[k] = binary_auc(scores[:, k], labels == k)
    for msg in notes:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)

    included = [k for k in range(c) if per_class_auc[k] is not None]
    if included:
        aucs = np.array([per_class_auc[k] for k in included])
        w = support[included].astype(np.float64)
        macro_auc = float(aucs.mean())
        weighted_auc = float((aucs * w).sum() / w.sum())
    else:
        macro_auc = weighted_auc = None

    return MetricsReport(
        accuracy=float(tp.sum() / n),
        macro_f1=macro_f1,
        macro_auc=macro_auc,
        weighted_ovr_auc=weighted_auc,
        confusion=cm.tolist(),
        per_class=per_class,
        per_class_auc=per_class_auc,
        warnings=notes,
    )


@dataclass
class VideoPrediction:
    video_id: str
    predicted_class: int
    vote_fraction: float
    mean_confidence: float
    frame_count: int


def _group(video_ids: Sequence) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = defaultdict(list)
    for i, vid in enumerate(video_ids):
        if vid is None or vid == "":
            raise ValueError(f"frame {i} has no video_id")
        groups[vid].append(i)
    return groups


def aggregate_video(frame_probs, video_ids: Sequence[str], rule: str = "majority") -> list[VideoPrediction]:
    """Reduce frame probabilities to one prediction per video, sorted by video id.

    ``majority``: most common frame argmax; ties go to the tied class with the
    highest mean probability, then the lowest index.  ``mean``: argmax of the
    mean probability vector.
    """
    if rule not in AGGREGATION_RULES:
        raise ValueError(f"unknown aggregation rule {rule!r}")
    probs = np.asarray(frame_probs, dtype=np.float64)
    if len(video_ids) != probs.shape[0]:
        raise ValueError("need one video_id per frame")
    out = []
    for vid, idx in sorted(_group(video_ids).items()):
        p = probs[idx]
        if p.shape[0] == 0:
            raise ValueError(f"video {vid} has no frames")
        votes = np.bincount(p.argmax(axis=1), minlength=p.shape[1])
        mean_p = p.mean(axis=0)
        if rule == "majority":
            tied = np.flatnonzero(votes == votes.max())
            best = tied[mean_p[tied] == mean_p[tied].max()]
            winner = int(best.min())
        else:
            winner = int(np.argmax(mean_p))
        out.append(VideoPrediction(
            video_id=vid,
            predicted_class=winner,
            vote_fraction=float(votes[winner] / p.shape[0]),
            mean_confidence=float(p.max(axis=1).mean()),
            frame_count=int(p.shape[0]),
        ))
    return out


def video_accuracy(preds: Sequence[VideoPrediction], truths: Mapping[str, int]) -> float:
    if not preds:
        raise ValueError("no video predictions")
    missing = [p.video_id for p in preds if p.video_id not in truths]
    if missing:
        raise KeyError(f"no truth label for video(s): {', '.join(missing)}")
    return sum(p.predicted_class == truths[p.video_id] for p in preds) / len(preds)


def confidence_band(mean_confidence: float) -> str:
    if mean_confidence > 0.9:
        return "high"
    if mean_confidence >= 0.5:
        return "moderate"
    return "low"


def confidence_report(
    frame_probs, video_ids: Sequence[str], truths: Mapping[str, int], rule: str = "majority"
) -> list[dict]:
    """Per-video verdict, mean max-probability and its confidence band."""
    rows = []
    for p in aggregate_video(frame_probs, video_ids, rule):
        truth = truths[p.video_id]
        rows.append({
            "video_id": p.video_id,
            "truth": int(truth),
            "predicted": p.predicted_class,
            "vote_fraction": p.vote_fraction,
            "mean_confidence": p.mean_confidence,
            "band": confidence_band(p.mean_confidence),
            "correct": p.predicted_class == truth,
        })
    return rows


def video_truths(labels: Sequence[int], video_ids: Sequence[str]) -> dict[str, int]:
    """Video label from its frames' labels; frames of one video must agree."""
    truths: dict[str, int] = {}
    for lab, vid in zip(labels, video_ids):
        if truths.setdefault(vid, int(lab)) != int(lab):
            raise ValueError(f"video {vid} has frames with conflicting labels")
    return truths


def write_videos_csv(rows: Sequence[dict], path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=VIDEOS_HEADER, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "correct": int(r["correct"])})
    return path


def write_metrics_json(payload: dict, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
