"""Fine-tuning loop, class balancing, plateau schedule, early stopping and seed sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from .calibrate import apply_temperature
from .config import ModalityConfig
from .ingest import DatasetManifest, SampleRecord, load_image
from .logits import LogitMatrix
from .metrics import aggregate_video, video_accuracy, video_truths
from .model import BackboneHandle, build_model, forward, load_checkpoint, save_checkpoint
from .transforms import NormalizationStats, make_pipeline, stats_from_source

log = logging.getLogger(__name__)

EPOCHS_HEADER = ["epoch", "train_loss", "val_loss", "val_accuracy", "lr"]


class TrainingError(RuntimeError):
    pass


def class_weights(manifest: DatasetManifest) -> np.ndarray:
    """Inverse-frequency weights ``N / (C * count_c)`` over the train split."""
    counts = manifest.class_counts("train")
    absent = [manifest.class_names[c] for c in np.flatnonzero(counts == 0)]
    if absent:
        raise ValueError(f"class(es) absent from train split: {', '.join(absent)}")
    return counts.sum() / (len(counts) * counts.astype(np.float64))


class PlateauScheduler:
    """Multiply lr by ``factor`` once val loss has failed to improve for ``patience`` epochs.

    Improvement means dropping below the best loss by more than ``threshold``.
    The bad-epoch counter resets after each reduction.
    """

    def __init__(self, optimizer: torch.optim.Optimizer, factor=0.5, patience=1, threshold=1e-8):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, val_loss: float) -> bool:
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.bad_epochs = 0
            return True
        return False


class EarlyStopping:
    """Stop once val accuracy has not beaten its best by ``min_delta`` for ``patience`` epochs."""

    def __init__(self, patience: int, min_delta: float = 1e-4):
        self.patience = patience
        self.min_delta = min_delta
        self.best = -math.inf
        self.counter = 0

    def step(self, val_accuracy: float) -> bool:
        if val_accuracy > self.best + self.min_delta:
            self.best = val_accuracy
            self.counter = 0
        else:
            self.counter += 1
        return self.counter >= self.patience


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float


@dataclass
class RunResult:
    seed: int
    logs: list[EpochLog]
    best_checkpoint: str
    stop_reason: str
    test_logits_path: str
    val_logits_path: str
    best_epoch: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "RunResult":
        data = json.loads(Path(path).read_text())
        data["logs"] = [EpochLog(**e) for e in data["logs"]]
        return cls(**data)


class ImageDataset(Dataset):
    """Manifest records -> (tensor, label, index); augmentation rng keyed by (seed, epoch, index)."""

    def __init__(self, records: Sequence[SampleRecord], pipeline, seed: int = 0):
        self.records = list(records)
        self.pipeline = pipeline
        self.seed = seed
        self.epoch = 0

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        rec = self.records[i]
        rng = np.random.default_rng([self.seed, self.epoch, i]) if self.pipeline.augments else None
        return self.pipeline(load_image(rec.source_path), rng), rec.label, i


def write_epochs_csv(logs: Sequence[EpochLog], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EPOCHS_HEADER)
        for e in logs:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.val_accuracy), repr(e.lr)])


def read_epochs_csv(path: str | os.PathLike) -> list[EpochLog]:
    with open(path, newline="") as f:
        return [
            EpochLog(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                     float(r["val_accuracy"]), float(r["lr"]))
            for r in csv.DictReader(f)
        ]


@torch.no_grad()
def predict(model: BackboneHandle, records: Sequence[SampleRecord], pipeline, batch_size: int = 64,
            num_workers: int = 0) -> LogitMatrix:
    """Eval-mode logits for ``records`` in their given order."""
    model.eval()
    loader = DataLoader(ImageDataset(records, pipeline), batch_size=batch_size, shuffle=False,
                        num_workers=num_workers)
    chunks = [forward(model, x).double() for x, _, _ in loader]
    return LogitMatrix(
        values=torch.cat(chunks).numpy(),
        labels=np.array([r.label for r in records]),
        sample_ids=[r.sample_id for r in records],
        video_ids=[r.video_id for r in records],
    )


def mean_cross_entropy(logits: LogitMatrix) -> tuple[float, float]:
    """Unweighted mean cross-entropy and accuracy of a logit table."""
    z = torch.from_numpy(logits.values)
    y = torch.from_numpy(logits.labels)
    loss = F.cross_entropy(z, y).item()
    acc = float((logits.values.argmax(axis=1) == logits.labels).mean())
    return loss, acc


def resolve_stats(config: ModalityConfig, manifest: DatasetManifest,
                  stats: NormalizationStats | None = None) -> NormalizationStats:
    return stats if stats is not None else stats_from_source(config.normalization_source, manifest)


def train(
    config: ModalityConfig,
    manifest: DatasetManifest,
    seed: int,
    run_dir: str | os.PathLike,
    stats: NormalizationStats | None = None,
    config_hash: str = "",
) -> RunResult:
    """Fine-tune one model and write the seed's run directory.

    Adam on (optionally class-weighted) cross-entropy.  After every epoch the
    val split is scored; the checkpoint is replaced only when val loss strictly
    improves, the plateau scheduler watches val loss and early stopping
    watches val accuracy.  Test and val logits of the best checkpoint are
    written to ``logits/``.
    """
    run_dir = Path(run_dir)
    train_recs, val_recs, test_recs = (manifest.split(s) for s in ("train", "val", "test"))
    for name, recs in (("train", train_recs), ("val", val_recs), ("test", test_recs)):
        if not recs:
            raise TrainingError(f"{name} split is empty")
    if manifest.num_classes != config.num_classes:
        raise TrainingError(
            f"manifest has {manifest.num_classes} classes but config expects {config.num_classes}"
        )
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "logits").mkdir(exist_ok=True)

    torch.set_num_threads(config.num_threads)
    torch.use_deterministic_algorithms(True, warn_only=True)
    torch.manual_seed(seed)

    stats = resolve_stats(config, manifest, stats)
    stats.to_json(run_dir / "stats.json")
    train_pipe = make_pipeline(stats, config.input_side, config.augment_policy)
    eval_pipe = make_pipeline(stats, config.input_side, None)

    model = build_model(config.num_classes, config.pretrained, config.architecture, seed, config.input_side)
    weight = torch.tensor(class_weights(manifest), dtype=torch.float32) if config.class_weighting else None
    optimizer = torch.optim.Adam(model.net.parameters(), lr=config.lr_init, weight_decay=config.weight_decay)
    scheduler = PlateauScheduler(optimizer, config.plateau_factor, config.plateau_patience,
                                 config.plateau_threshold)
    stopper = EarlyStopping(config.early_stop_patience, config.early_stop_min_delta)

    dataset = ImageDataset(train_recs, train_pipe, seed)
    ckpt_path = run_dir / "checkpoints" / "best.pt"
    logs: list[EpochLog] = []
    best_loss = math.inf
    best_epoch = 0
    stop_reason = "max_epochs"

    for epoch in range(1, config.max_epochs + 1):
        dataset.epoch = epoch
        order = np.random.default_rng([seed, epoch]).permutation(len(dataset)).tolist()
        batches = [order[i:i + config.batch_size] for i in range(0, len(order), config.batch_size)]
        loader = DataLoader(dataset, batch_sampler=batches, num_workers=config.num_workers)
        lr = scheduler.lr
        model.train()
        total, seen = 0.0, 0
        for b, (x, y, _) in enumerate(loader):
            optimizer.zero_grad(set_to_none=True)
            loss = F.cross_entropy(forward(model, x), y, weight=weight)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            optimizer.step()
            total += loss.item() * len(y)
            seen += len(y)

        val_loss, val_acc = mean_cross_entropy(
            predict(model, val_recs, eval_pipe, config.batch_size, config.num_workers)
        )
        logs.append(EpochLog(epoch, total / seen, val_loss, val_acc, lr))
        write_epochs_csv(logs, run_dir / "epochs.csv")
        log.info("seed %d epoch %d: train %.4f val %.4f acc %.4f lr %.2e",
                 seed, epoch, total / seen, val_loss, val_acc, lr)

        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            save_checkpoint(model, {
                "epoch": epoch, "val_loss": val_loss, "val_accuracy": val_acc, "seed": seed,
                "config_hash": config_hash, "stats_ref": "stats.json",
            }, ckpt_path)
        scheduler.step(val_loss)
        if stopper.step(val_acc):
            stop_reason = "early_stop"
            break

    best, _ = load_checkpoint(ckpt_path, config_hash or None)
    val_logits = predict(best, val_recs, eval_pipe, config.batch_size, config.num_workers)
    test_logits = predict(best, test_recs, eval_pipe, config.batch_size, config.num_workers)
    result = RunResult(
        seed=seed,
        logs=logs,
        best_checkpoint=str(ckpt_path),
        stop_reason=stop_reason,
        test_logits_path=str(test_logits.to_csv(run_dir / "logits" / "test.csv")),
        val_logits_path=str(val_logits.to_csv(run_dir / "logits" / "val.csv")),
        best_epoch=best_epoch,
    )
    result.to_json(run_dir / "result.json")
    return result


def seed_score(logits: LogitMatrix, modality: str, aggregation: str = "majority",
               temperature: float = 1.0) -> float:
    """Test accuracy (histology) or per-video accuracy (colonoscopy) of one run."""
    if modality == "colonoscopy":
        probs = apply_temperature(logits, temperature)
        preds = aggregate_video(probs, logits.video_ids, aggregation)
        return video_accuracy(preds, video_truths(logits.labels, logits.video_ids))
    return float((logits.values.argmax(axis=1) == logits.labels).mean())


def summarize_scores(scores: dict[int, float]) -> dict:
    values = np.array(list(scores.values()), dtype=np.float64)
    return {
        "per_seed": {str(k): v for k, v in scores.items()},
        "mean": float(values.mean()),
        "std": float(values.std(ddof=0)),
    }


def run_seed_sweep(
    config: ModalityConfig,
    manifest: DatasetManifest,
    run_root: str | os.PathLike,
    stats: NormalizationStats | None = None,
    config_hash: str = "",
) -> tuple[list[RunResult], dict]:
    """Independent :func:`train` per configured seed plus a per-seed score summary."""
    if not config.seeds:
        raise ValueError("no seeds configured")
    stats = resolve_stats(config, manifest, stats)
    results, scores = [], {}
    for seed in config.seeds:
        res = train(config, manifest, seed, Path(run_root) / str(seed), stats, config_hash)
        results.append(res)
        scores[seed] = seed_score(LogitMatrix.from_csv(res.test_logits_path), config.modality,
                                  config.aggregation)
    summary = {"modality": config.modality,
               "metric": "video_accuracy" if config.modality == "colonoscopy" else "test_accuracy",
               **summarize_scores(scores)}
    return results, summary
