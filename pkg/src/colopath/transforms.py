"""Resizing, per-channel normalization and train-time augmentation.

Images are float tensors shaped ``(3, H, W)`` with values in ``[0, 1]`` until
:func:`normalize` maps each channel to ``(v - mean) / std``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF

from .ingest import DatasetManifest, load_image

STD_FLOOR = 1e-6


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("stats need three channels")
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(max(float(s), STD_FLOOR) for s in self.std))

    def to_json(self, path: str | os.PathLike) -> None:
        payload = {"mean": list(self.mean), "std": list(self.std), "scale": "unit"}
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "NormalizationStats":
        payload = json.loads(Path(path).read_text())
        if payload.get("scale", "unit") != "unit":
            raise ValueError(f"unsupported stats scale {payload['scale']!r}")
        return cls(tuple(payload["mean"]), tuple(payload["std"]))


IMAGENET_STATS = NormalizationStats((0.485, 0.456, 0.406), (0.229, 0.224, 0.225))


@dataclass(frozen=True)
class AugmentPolicy:
    hflip_prob: float = 0.5
    max_rotation_deg: float = 0.0
    jitter_strength: float = 0.0

    def __post_init__(self):
        if not 0 <= self.hflip_prob <= 1:
            raise ValueError("hflip_prob must be in [0, 1]")
        if self.max_rotation_deg < 0:
            raise ValueError("max_rotation_deg must be >= 0")
        if not 0 <= self.jitter_strength < 1:
            raise ValueError("jitter_strength must be in [0, 1)")


HISTOLOGY_POLICY = AugmentPolicy(0.5, 15.0, 0.10)
COLONOSCOPY_POLICY = AugmentPolicy(0.5, 5.0, 0.05)


def to_tensor(img: np.ndarray) -> torch.Tensor:
    """uint8 ``H x W x 3`` -> float32 ``(3, H, W)`` in ``[0, 1]``."""
    return torch.from_numpy(np.ascontiguousarray(img.transpose(2, 0, 1))).float().div_(255.0)


def compute_stats(manifest: DatasetManifest, split: str = "train") -> NormalizationStats:
    """Per-channel mean and population std over every pixel of ``split``."""
    records = manifest.split(split)
    if not records:
        raise ValueError(f"cannot compute stats: split {split!r} is empty")
    total = np.zeros(3)
    total_sq = np.zeros(3)
    count = 0
    for r in records:
        px = load_image(r.source_path).reshape(-1, 3).astype(np.float64) / 255.0
        total += px.sum(axis=0)
        total_sq += np.square(px).sum(axis=0)
        count += px.shape[0]
    mean = total / count
    var = np.maximum(total_sq / count - np.square(mean), 0.0)
    return NormalizationStats(tuple(mean), tuple(np.sqrt(var)))


def normalize(img: torch.Tensor, stats: NormalizationStats) -> torch.Tensor:
    mean = torch.tensor(stats.mean, dtype=img.dtype).view(3, 1, 1)
    std = torch.tensor(stats.std, dtype=img.dtype).view(3, 1, 1)
    return (img - mean) / std


def denormalize(img: torch.Tensor, stats: NormalizationStats) -> torch.Tensor:
    mean = torch.tensor(stats.mean, dtype=img.dtype).view(3, 1, 1)
    std = torch.tensor(stats.std, dtype=img.dtype).view(3, 1, 1)
    return img * std + mean


def resize_bilinear(img: torch.Tensor, side: int = 224) -> torch.Tensor:
    """Bilinear resize to ``side x side`` with half-pixel centres (align_corners=False).

    Accepts ``(H, W)``, ``(C, H, W)`` or ``(N, C, H, W)`` tensors.
    """
    if img.numel() == 0:
        raise ValueError("cannot resize an empty image")
    if tuple(img.shape[-2:]) == (side, side):
        return img
    shape = img.shape
    x = img.reshape(-1, 1, *shape[-2:])
    out = F.interpolate(x, size=(side, side), mode="bilinear", align_corners=False, antialias=False)
    return out.reshape(*shape[:-2], side, side)


def rotate_reflect(img: torch.Tensor, angle_deg: float) -> torch.Tensor:
    """Rotate counter-clockwise about the centre, filling with reflected content."""
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    _, h, w = img.shape
    # normalized coords: scale by aspect so the rotation is rigid in pixel space
    mat = torch.tensor([[c, -s * h / w, 0.0], [s * w / h, c, 0.0]], dtype=img.dtype)
    grid = F.affine_grid(mat.unsqueeze(0), [1, 3, h, w], align_corners=False)
    out = F.grid_sample(img.unsqueeze(0), grid, mode="bilinear", padding_mode="reflection", align_corners=False)
    return out.squeeze(0)


def augment(img: torch.Tensor, policy: AugmentPolicy, rng: np.random.Generator) -> torch.Tensor:
    """Flip, rotate, colour-jitter, clamp -- always in that order.

    Every call draws the same number of values from ``rng`` so a sample's
    augmentation does not depend on which branches fired.
    """
    flip = rng.random() < policy.hflip_prob
    angle = rng.uniform(-policy.max_rotation_deg, policy.max_rotation_deg)
    s = policy.jitter_strength
    brightness, contrast, saturation = rng.uniform(1 - s, 1 + s, size=3)

    out = img
    if flip:
        out = torch.flip(out, dims=[-1])
    if policy.max_rotation_deg > 0 and angle != 0:
        out = rotate_reflect(out, angle)
    if s > 0:
        out = TF.adjust_brightness(out, float(brightness))
        out = TF.adjust_contrast(out, float(contrast))
        out = TF.adjust_saturation(out, float(saturation))
    return out.clamp(0.0, 1.0)


def make_pipeline(
    stats: NormalizationStats,
    side: int = 224,
    policy: AugmentPolicy | None = None,
) -> Callable[[np.ndarray, np.random.Generator | None], torch.Tensor]:
    """Compose uint8 image -> resized -> (augmented) -> normalized tensor.

    ``policy=None`` gives the evaluation pipeline, which never augments.
    """

    def pipeline(img: np.ndarray, rng: np.random.Generator | None = None) -> torch.Tensor:
        x = resize_bilinear(to_tensor(img), side)
        if policy is not None:
            if rng is None:
                raise ValueError("training pipeline needs an rng")
            x = augment(x, policy, rng)
        return normalize(x, stats)

    pipeline.augments = policy is not None
    return pipeline


def stats_from_source(source: str, manifest: DatasetManifest | None = None) -> NormalizationStats:
    if source == "imagenet_constants":
        return IMAGENET_STATS
    if source == "dataset_empirical":
        if manifest is None:
            raise ValueError("dataset_empirical stats need a manifest")
        return compute_stats(manifest, "train")
    raise ValueError(f"unknown normalization source {source!r}")

