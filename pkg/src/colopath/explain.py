"""Grad-CAM heatmaps and overlay rendering."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ._colormap import JET_LUT
from .ingest import quadrant_bounds, save_png
from .model import BackboneHandle, forward
from .transforms import resize_bilinear

COLORMAP = np.asarray(JET_LUT, dtype=np.uint8)


@dataclass
class Heatmap:
    values: np.ndarray
    target_class: int

    def to_csv(self, path: str | os.PathLike) -> None:
        np.savetxt(path, self.values, delimiter=",", fmt="%.8g")


def grad_cam_raw(
    model: BackboneHandle, img: torch.Tensor, target_class: int, layer: str | None = None
) -> np.ndarray:
    """Rectified, unnormalized class-activation map at the target layer's resolution."""
    if not 0 <= target_class < model.head_dim:
        raise ValueError(f"target_class {target_class} outside [0, {model.head_dim})")
    module = model.layer(layer)
    captured: list[torch.Tensor] = []
    hook = module.register_forward_hook(lambda _m, _i, out: captured.append(out))
    try:
        with torch.enable_grad():
            logits = forward(model, img.unsqueeze(0) if img.ndim == 3 else img)
            acts = captured[-1]
            (grads,) = torch.autograd.grad(logits[0, target_class], acts)
    finally:
        hook.remove()
    weights = grads[0].mean(dim=(1, 2), keepdim=True)
    cam = torch.relu((weights * acts[0]).sum(dim=0))
    return cam.detach().double().numpy()


def grad_cam(
    model: BackboneHandle, img: torch.Tensor, target_class: int, layer: str | None = None
) -> Heatmap:
    """Grad-CAM for one normalized ``(3, H, W)`` image, upsampled to the input size.

    Channel weights are the spatial mean of the target logit's gradient; the
    weighted activation sum is rectified, bilinearly upsampled and divided by
    its max.  An all-zero map stays all-zero.
    """
    raw = grad_cam_raw(model, img, target_class, layer)
    side = img.shape[-1]
    up = resize_bilinear(torch.from_numpy(raw), side).numpy()
    up = np.maximum(up, 0.0)
    peak = up.max()
    values = up / peak if peak > 0 else np.zeros_like(up)
    return Heatmap(values=values, target_class=target_class)


def colorize(heatmap: np.ndarray) -> np.ndarray:
    """Map ``[0, 1]`` values through the fixed colour table -> float RGB in ``[0, 1]``."""
    idx = np.clip(np.rint(np.asarray(heatmap) * 255), 0, 255).astype(np.int64)
    return COLORMAP[idx].astype(np.float64) / 255.0


def overlay(
    img: np.ndarray,
    heatmap: Heatmap | np.ndarray,
    alpha: float = 0.4,
    path: str | os.PathLike | None = None,
) -> np.ndarray:
    """Blend ``(1 - alpha) * img + alpha * colormap(heatmap)``; returns uint8 RGB.

    ``img`` is ``H x W x 3`` in ``[0, 1]``.  Written as PNG when ``path`` is given.
    """
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[:2] != values.shape:
        raise ValueError(f"image {img.shape} and heatmap {values.shape} shapes do not match")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must be in [0, 1]")
    blended = (1 - alpha) * img + alpha * colorize(values)
    rendered = np.clip(np.rint(blended * 255), 0, 255).astype(np.uint8)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_png(rendered, path)
    return rendered


def quadrant_mass(values: np.ndarray, quadrant: int) -> float:
    """Share of total heatmap mass inside one image quadrant (0 TL, 1 TR, 2 BL, 3 BR)."""
    total = values.sum()
    if total <= 0:
        return 0.0
    rows, cols = quadrant_bounds(quadrant, values.shape[0])
    return float(values[rows, cols].sum() / total)
