"""Backbone construction, head replacement and checkpoint (de)serialization."""

from __future__ import annotations

import io
import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

log = logging.getLogger(__name__)

ARCHITECTURES = ("resnet50", "tiny")
HEAD_INIT = "uniform_fan_in"


class PretrainedWeightsUnavailable(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class ConfigHashMismatch(UserWarning):
    pass


class TinyCNN(nn.Module):
    """Three conv stages + global pooling; a fast stand-in for synthetic runs."""

    def __init__(self, num_classes: int, width: int = 16):
        super().__init__()

        def stage(c_in, c_out):
            return nn.Sequential(
                nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
            )

        self.stage1 = stage(3, width)
        self.stage2 = stage(width, 2 * width)
        self.stage3 = stage(2 * width, 4 * width)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(4 * width, num_classes)

    def forward(self, x):
        x = self.stage3(self.stage2(self.stage1(x)))
        return self.fc(torch.flatten(self.pool(x), 1))


@dataclass
class BackboneHandle:
    net: nn.Module
    architecture: str
    num_classes: int
    pretrained: bool
    last_conv_layer_id: str
    input_side: int = 224
    seed: int = 0
    warnings: list[str] = field(default_factory=list)

    @property
    def head_dim(self) -> int:
        return self.num_classes

    def layer(self, name: str | None = None) -> nn.Module:
        return dict(self.net.named_modules())[name or self.last_conv_layer_id]

    def eval(self) -> "BackboneHandle":
        self.net.eval()
        return self

    def train(self) -> "BackboneHandle":
        self.net.train()
        return self

    def __call__(self, batch: torch.Tensor) -> torch.Tensor:
        return forward(self, batch)

    def describe(self) -> dict:
        return {
            "architecture": self.architecture,
            "num_classes": self.num_classes,
            "pretrained": self.pretrained,
            "last_conv_layer_id": self.last_conv_layer_id,
            "input_side": self.input_side,
            "seed": self.seed,
            "head_init": HEAD_INIT,
        }


def _load_imagenet_resnet50():
    from torchvision.models import ResNet50_Weights, resnet50

    try:
        return resnet50(weights=ResNet50_Weights.IMAGENET1K_V1)
    except Exception as e:  # network/cache failures surface as many exception types
        hub = torch.hub.get_dir()
        raise PretrainedWeightsUnavailable(
            "ImageNet ResNet-50 weights could not be loaded "
            f"({type(e).__name__}: {e}). Download "
            f"{ResNet50_Weights.IMAGENET1K_V1.url} into {hub}/checkpoints/ "
            "(or set TORCH_HOME) and retry, or build with pretrained=False."
        ) from e


def build_model(
    num_classes: int,
    pretrained: bool = False,
    architecture: str = "resnet50",
    seed: int = 0,
    input_side: int = 224,
) -> BackboneHandle:
    """Build a backbone whose final linear layer emits ``num_classes`` logits.

    The body is ImageNet-initialized when ``pretrained`` and seed-initialized
    otherwise; the head is always a fresh ``nn.Linear`` drawn under ``seed``.
    Nothing is frozen.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture!r}; choose from {ARCHITECTURES}")

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        if architecture == "resnet50":
            if pretrained:
                net = _load_imagenet_resnet50()
            else:
                from torchvision.models import resnet50

                net = resnet50(weights=None)
            net.fc = nn.Linear(net.fc.in_features, num_classes)
            layer_id = "layer4"
        else:
            if pretrained:
                raise PretrainedWeightsUnavailable("the tiny backbone has no pretrained weights")
            net = TinyCNN(num_classes)
            layer_id = "stage3"
    for p in net.parameters():
        p.requires_grad_(True)
    return BackboneHandle(net, architecture, num_classes, pretrained, layer_id, input_side, seed)


def forward(model: BackboneHandle, batch: torch.Tensor) -> torch.Tensor:
    """Raw pre-softmax scores, one row per input image."""
    side = model.input_side
    if batch.ndim != 4 or batch.shape[1] != 3 or tuple(batch.shape[-2:]) != (side, side):
        raise ValueError(
            f"expected a batch shaped (N, 3, {side}, {side}), got {tuple(batch.shape)}"
        )
    return model.net(batch)


def _sidecar(path: Path) -> Path:
    return path.with_name(path.stem + ".meta.json")


def save_checkpoint(model: BackboneHandle, meta: dict, path: str | os.PathLike) -> Path:
    """Write ``<path>`` (state dict) and ``<stem>.meta.json``; returns the weights path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    full_meta = {**meta, "model": model.describe()}
    buf = io.BytesIO()
    torch.save(model.net.state_dict(), buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    _sidecar(path).write_text(json.dumps(full_meta, indent=2, sort_keys=True) + "\n")
    return path


def read_checkpoint_meta(path: str | os.PathLike) -> dict:
    sidecar = _sidecar(Path(path))
    if not sidecar.is_file():
        raise CheckpointError(f"checkpoint metadata absent: {sidecar}")
    try:
        return json.loads(sidecar.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupted checkpoint metadata: {sidecar}") from e


def load_checkpoint(
    path: str | os.PathLike, expected_config_hash: str | None = None
) -> tuple[BackboneHandle, dict]:
    """Rebuild the model saved at ``path``; returns ``(handle, meta)`` in eval mode.

    A ``config_hash`` differing from ``expected_config_hash`` is not fatal: it
    is warned about and appended to ``handle.warnings``.
    """
    path = Path(path)
    meta = read_checkpoint_meta(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint weights missing: {path}")
    spec = meta.get("model", {})
    handle = build_model(
        spec.get("num_classes", 2),
        pretrained=False,
        architecture=spec.get("architecture", "resnet50"),
        seed=spec.get("seed", 0),
        input_side=spec.get("input_side", 224),
    )
    handle.pretrained = bool(spec.get("pretrained", False))
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
        handle.net.load_state_dict(state)
    except Exception as e:
        raise CheckpointError(f"corrupted checkpoint weights: {path} ({e})") from e
    if expected_config_hash is not None and meta.get("config_hash") != expected_config_hash:
        msg = (
            f"checkpoint {path.name} config_hash {meta.get('config_hash')!r} "
            f"does not match run config {expected_config_hash!r}"
        )
        warnings.warn(msg, ConfigHashMismatch, stacklevel=2)
        log.warning(msg)
        handle.warnings.append(msg)
    return handle.eval(), meta
