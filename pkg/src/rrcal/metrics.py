"""Calibration and selective-prediction metrics.

ECE partitions predictions into equal-width confidence bins and averages the
per-bin |accuracy - confidence| gap weighted by bin mass. Risk-coverage
orders predictions by confidence and reports the error rate within every
answered prefix; AURC is the mean of those prefix risks, so lower is better.
All functions are pure and deterministic (confidence ties break by query id).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .core import Prediction

__all__ = [
    "EceBin",
    "EceReport",
    "RiskCoveragePoint",
    "SelectiveResult",
    "aurc",
    "compute_ece",
    "reliability_rows",
    "risk_coverage",
    "selective_predict",
]


@dataclass(frozen=True, slots=True)
class EceBin:
    lo: float
    hi: float
    count: int
    avg_conf: float
    avg_acc: float


@dataclass(frozen=True, slots=True)
class EceReport:
    ece: float
    bins: tuple[EceBin, ...]
    n: int


@dataclass(frozen=True, slots=True)
class RiskCoveragePoint:
    coverage: float
    risk: float
    threshold: float


@dataclass(frozen=True, slots=True)
class SelectiveResult:
    coverage: float
    risk: float
    answered: tuple[str, ...]


def compute_ece(predictions: list[Prediction], m_bins: int = 10) -> EceReport:
    """Expected calibration error over equal-width bins.

    Bin j covers [(j-1)/M, j/M), with the last bin closed at 1.0; empty bins
    contribute nothing. Raises on an empty prediction list.
    """
    if not predictions:
        raise ValueError("ECE is undefined for an empty prediction list")
    if m_bins < 1:
        raise ValueError("m_bins must be >= 1")
    n = len(predictions)
    conf_sum = [0.0] * m_bins
    acc_sum = [0.0] * m_bins
    count = [0] * m_bins
    for p in predictions:
        j = min(int(p.confidence * m_bins), m_bins - 1)
        count[j] += 1
        conf_sum[j] += p.confidence
        acc_sum[j] += 1.0 if p.correct else 0.0
    bins = []
    ece = 0.0
    for j in range(m_bins):
        if count[j]:
            avg_conf = conf_sum[j] / count[j]
            avg_acc = acc_sum[j] / count[j]
            ece += (count[j] / n) * abs(avg_acc - avg_conf)
        else:
            avg_conf = 0.0
            avg_acc = 0.0
        bins.append(
            EceBin(lo=j / m_bins, hi=(j + 1) / m_bins, count=count[j], avg_conf=avg_conf, avg_acc=avg_acc)
        )
    return EceReport(ece=ece, bins=tuple(bins), n=n)


def reliability_rows(report: EceReport) -> list[str]:
    """CSV rows (with header) for a reliability diagram, one row per bin."""
    rows = ["bin_lo,bin_hi,count,avg_conf,avg_acc"]
    for b in report.bins:
        rows.append(
            f"{b.lo:.12g},{b.hi:.12g},{b.count},{b.avg_conf:.12g},{b.avg_acc:.12g}"
        )
    return rows


def _sorted_by_confidence(predictions: list[Prediction]) -> list[Prediction]:
    return sorted(predictions, key=lambda p: (-p.confidence, p.query_id))


def risk_coverage(predictions: list[Prediction]) -> list[RiskCoveragePoint]:
    """One point per answered prefix of the confidence-descending ordering."""
    if not predictions:
        raise ValueError("risk_coverage needs at least one prediction")
    ordered = _sorted_by_confidence(predictions)
    n = len(ordered)
    points = []
    wrong = 0
    for i, p in enumerate(ordered, start=1):
        if not p.correct:
            wrong += 1
        points.append(
            RiskCoveragePoint(coverage=i / n, risk=wrong / i, threshold=p.confidence)
        )
    return points


def aurc(predictions: list[Prediction]) -> float:
    """Area under the risk-coverage curve: the mean of the prefix risks."""
    points = risk_coverage(predictions)
    return sum(p.risk for p in points) / len(points)


def selective_predict(predictions: list[Prediction], threshold: float) -> SelectiveResult:
    """Answer exactly the predictions with confidence >= threshold.

    Risk is the error rate among answered queries, 0 when nothing is
    answered.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must be in [0, 1]")
    answered = [p for p in predictions if p.confidence >= threshold]
    n = len(predictions)
    if not answered:
        return SelectiveResult(coverage=0.0, risk=0.0, answered=())
    wrong = sum(1 for p in answered if not p.correct)
    return SelectiveResult(
        coverage=len(answered) / n if n else 0.0,
        risk=wrong / len(answered),
        answered=tuple(p.query_id for p in answered),
    )
