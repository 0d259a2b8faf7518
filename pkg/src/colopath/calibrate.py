"""Post-hoc temperature scaling and expected calibration error."""

from __future__ import annotations

import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .logits import LogitMatrix

log = logging.getLogger(__name__)

T_BOUNDS = (0.05, 10.0)
T_TOL = 1e-4
PROB_FLOOR = 1e-12
DEFAULT_BINS = 15
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class CalibrationResult:
    temperature: float
    nll_before: float
    nll_after: float
    ece_before: float
    ece_after: float
    num_bins: int

    def to_json(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "CalibrationResult":
        return cls(**json.loads(Path(path).read_text()))


def _values(logits) -> np.ndarray:
    return logits.values if isinstance(logits, LogitMatrix) else np.asarray(logits, dtype=np.float64)


def apply_temperature(logits, T: float) -> np.ndarray:
    """Row-wise ``softmax(z / T)``."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    z = _values(logits) / T
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def nll(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean natural-log negative log-likelihood of the true class."""
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, PROB_FLOOR))))


def expected_calibration_error(probs: np.ndarray, labels, num_bins: int = DEFAULT_BINS) -> float:
    """Max-probability ECE with ``num_bins`` equal-width, right-closed bins on ``(0, 1]``."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    sums = probs.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-6)
    if bad.size:
        raise ValueError(f"row {bad[0]} sums to {sums[bad[0]]!r}, not 1")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    bins = np.clip(np.ceil(conf * num_bins).astype(np.int64) - 1, 0, num_bins - 1)
    n = len(conf)
    ece = 0.0
    for b in np.unique(bins):
        mask = bins == b
        ece += mask.sum() / n * abs(correct[mask].mean() - conf[mask].mean())
    return float(ece)


def _golden_section(f, lo: float, hi: float, tol: float) -> float:
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a >= tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def fit_temperature(val_logits: LogitMatrix, num_bins: int = DEFAULT_BINS) -> CalibrationResult:
    """Fit a scalar temperature on validation logits by minimizing mean NLL.

    NLL is unimodal in ``T`` (convex in ``1/T``), so golden-section search over
    ``[0.05, 10]`` finds the optimum to within ``1e-4``.  If the search does not
    beat ``T = 1`` then ``T = 1`` is kept, so NLL never gets worse.
    """
    if len(val_logits) < 2:
        raise ValueError("temperature fitting needs at least two rows")
    z, y = val_logits.values, val_logits.labels

    def objective(T: float) -> float:
        return nll(apply_temperature(z, T), y)

    before = apply_temperature(z, 1.0)
    nll_before = nll(before, y)
    ece_before = expected_calibration_error(before, y, num_bins)

    if np.all(np.ptp(z, axis=1) == 0):
        warnings.warn("all logit rows are constant; temperature left at 1", RuntimeWarning, stacklevel=2)
        return CalibrationResult(1.0, nll_before, nll_before, ece_before, ece_before, num_bins)

    T = _golden_section(objective, *T_BOUNDS, T_TOL)
    if objective(T) > nll_before:
        T = 1.0
    after = apply_temperature(z, T)
    result = CalibrationResult(
        temperature=float(T),
        nll_before=nll_before,
        nll_after=nll(after, y),
        ece_before=ece_before,
        ece_after=expected_calibration_error(after, y, num_bins),
        num_bins=num_bins,
    )
    log.info("fitted temperature %.4f (NLL %.4f -> %.4f)", T, result.nll_before, result.nll_after)
    return result
