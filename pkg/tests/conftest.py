import math
import time

import numpy as np
import pytest

from colopath.config import ModalityConfig
from colopath.ingest import SyntheticSpec, generate_synthetic

ACCEPTANCE_LINES: list[str] = []
TIMINGS: dict[str, float] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_config(**overrides) -> ModalityConfig:
    """Histology defaults on the tiny backbone, sized for the planted-quadrant data."""
    base = dict(num_classes=4, architecture="tiny", pretrained=False, batch_size=32,
                max_epochs=50, early_stop_patience=5, seeds=[42])
    return ModalityConfig.histology(**{**base, **overrides})


@pytest.fixture(scope="session")
def synthetic(tmp_path_factory):
    """4 classes, 40/8/8 per class, 64 px, mild noise."""
    out = tmp_path_factory.mktemp("synthetic")
    return generate_synthetic(SyntheticSpec(4, (40, 8, 8), 64, 0.05), 0, out)


@pytest.fixture(scope="session")
def small_synthetic(tmp_path_factory):
    out = tmp_path_factory.mktemp("small_synthetic")
    return generate_synthetic(SyntheticSpec(2, (12, 4, 4), 32, 0.05), 1, out)


@pytest.fixture(scope="session")
def trained_run(synthetic, tmp_path_factory):
    """Full-resolution tiny-backbone run at seed 42 (shared by several modules)."""
    from colopath.trainer import train

    run_dir = tmp_path_factory.mktemp("run") / "42"
    start = time.perf_counter()
    result = train(tiny_config(), synthetic, 42, run_dir, config_hash="fixture")
    TIMINGS["trained_run"] = time.perf_counter() - start
    return result, run_dir


def grid_temperature(z: np.ndarray, y: np.ndarray, lo=0.05, hi=10.0, step=1e-3) -> float:
    """Brute-force argmin of mean NLL over a uniform temperature grid."""
    from scipy.special import logsumexp

    grid = lo + step * np.arange(int(round((hi - lo) / step)) + 1)
    best_t, best = math.nan, math.inf
    picked = z[np.arange(len(y)), y]
    for t in grid:
        val = np.mean(logsumexp(z / t, axis=1) - picked / t)
        if val < best:
            best, best_t = val, t
    return float(best_t)


def pairwise_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """O(n^2) concordant-pair count with ties worth one half."""
    pos = scores[positive]
    neg = scores[~positive]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def majority_oracle(probs: np.ndarray, video_ids) -> dict:
    """Independent per-video vote: count argmaxes, break ties by mean prob then index."""
    out = {}
    for vid in set(video_ids):
        rows = [probs[i] for i, v in enumerate(video_ids) if v == vid]
        counts = {}
        for row in rows:
            k = max(range(len(row)), key=lambda j: (row[j], -j))
            counts[k] = counts.get(k, 0) + 1
        top = max(counts.values())
        tied = [k for k, c in counts.items() if c == top]
        means = {k: sum(r[k] for r in rows) / len(rows) for k in tied}
        best = max(means.values())
        out[vid] = min(k for k in tied if means[k] == best)
    return out
