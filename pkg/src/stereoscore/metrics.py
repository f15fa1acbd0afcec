"""
SROCC, PLCC and RMSE between predicted and subjective scores.

PLCC is computed on raw scores; no logistic mapping is fitted first.
Zero-variance input raises ``UndefinedCorrelationError`` rather than
returning NaN.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, UndefinedCorrelationError

REPORT_COLUMNS = ("partition", "repeat", "n", "srocc", "plcc", "rmse")


def _pairs(predicted, subjective, min_n: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predicted, dtype=np.float64).ravel()
    s = np.asarray(subjective, dtype=np.float64).ravel()
    if p.shape != s.shape:
        raise DimensionError(f"length mismatch: {p.size} predicted vs {s.size} subjective scores")
    if p.size < min_n:
        raise DimensionError(f"need at least {min_n} score pairs, got {p.size}")
    if not (np.isfinite(p).all() and np.isfinite(s).all()):
        raise ValueError("scores must be finite")
    return p, s


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined: one of the score lists is constant")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def rankdata(x) -> np.ndarray:
    """1-based ranks with ties given the average of the ranks they span."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    n = x.size
    while i < n:
        j = i
        while j + 1 < n and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def plcc(predicted, subjective) -> float:
    p, s = _pairs(predicted, subjective, min_n=2)
    return _pearson(p, s)


def srocc(predicted, subjective) -> float:
    p, s = _pairs(predicted, subjective, min_n=2)
    return _pearson(rankdata(p), rankdata(s))


def rmse(predicted, subjective) -> float:
    p, s = _pairs(predicted, subjective)
    d = p - s
    return math.sqrt(float(np.dot(d, d)) / d.size)


@dataclass
class EvalRow:
    partition: str
    repeat: str
    n: int
    srocc: float
    plcc: float
    rmse: float


@dataclass
class EvalReport:
    """Per-repeat metric rows plus their mean.

    ``predictions`` holds (sample_id, predicted, mos_stereo) for every scored
    image of every repeat, in evaluation order. ``splits`` and ``records``
    carry the split plans and training runs behind the rows, when known.
    """

    rows: List[EvalRow] = field(default_factory=list)
    predictions: List[Tuple[str, float, float]] = field(default_factory=list)
    splits: list = field(default_factory=list)
    records: list = field(default_factory=list)

    @property
    def mean(self) -> EvalRow:
        if not self.rows:
            raise ValueError("empty report")
        k = len(self.rows)
        parts = sorted({r.partition for r in self.rows})
        return EvalRow(
            partition=parts[0] if len(parts) == 1 else "+".join(parts),
            repeat="mean",
            n=sum(r.n for r in self.rows),
            srocc=math.fsum(r.srocc for r in self.rows) / k,
            plcc=math.fsum(r.plcc for r in self.rows) / k,
            rmse=math.fsum(r.rmse for r in self.rows) / k,
        )

    @property
    def srocc(self) -> float:
        return self.mean.srocc

    @property
    def plcc(self) -> float:
        return self.mean.plcc

    @property
    def rmse(self) -> float:
        return self.mean.rmse

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)
        self.predictions.extend(other.predictions)
        self.splits.extend(other.splits)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for r in self.rows + [self.mean]:
                w.writerow([r.partition, r.repeat, r.n, f"{r.srocc:.6f}", f"{r.plcc:.6f}", f"{r.rmse:.6f}"])

    def table(self) -> str:
        lines = [f"{'partition':<12}{'repeat':>8}{'n':>7}{'SROCC':>10}{'PLCC':>10}{'RMSE':>10}"]
        for r in self.rows + [self.mean]:
            lines.append(f"{r.partition:<12}{r.repeat:>8}{r.n:>7}{r.srocc:>10.4f}{r.plcc:>10.4f}{r.rmse:>10.4f}")
        return "\n".join(lines)


def evaluate_scores(predicted: Sequence[float], subjective: Sequence[float],
                    partition: str = "eval", repeat: str = "0",
                    ids: Optional[Sequence[str]] = None) -> EvalReport:
    row = EvalRow(partition, str(repeat), len(predicted),
                  srocc(predicted, subjective), plcc(predicted, subjective), rmse(predicted, subjective))
    preds = list(zip(ids, map(float, predicted), map(float, subjective))) if ids is not None else []
    return EvalReport([row], preds)
