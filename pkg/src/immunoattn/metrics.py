"""Binary classification metrics for scored predictions."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import DataError


@dataclass(frozen=True)
class ScoredLabel:
    id: str
    score: float
    label: int

    def __post_init__(self):
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise DataError(f"{self.id!r}: score {self.score} outside [0, 1]")
        if self.label not in (0, 1):
            raise DataError(f"{self.id!r}: label must be 0 or 1, got {self.label}")


def _arrays(scored: Sequence[ScoredLabel]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([s.score for s in scored], dtype=np.float64)
    labels = np.array([s.label for s in scored], dtype=np.int64)
    return scores, labels


def confusion(scored: Sequence[ScoredLabel], threshold: float = 0.5) -> tuple[int, int, int, int]:
    """(tp, tn, fp, fn) with a strict ``score > threshold`` positive rule."""
    if not 0.0 <= threshold <= 1.0:
        raise DataError(f"threshold must lie in [0, 1], got {threshold}")
    scores, labels = _arrays(scored)
    pred = scores > threshold
    pos = labels == 1
    return (
        int(np.sum(pred & pos)),
        int(np.sum(~pred & ~pos)),
        int(np.sum(pred & ~pos)),
        int(np.sum(~pred & pos)),
    )


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def basic_rates(tp: int, tn: int, fp: int, fn: int) -> tuple[float, float, float, float]:
    """Accuracy, precision, recall and F1. Any 0/0 is reported as 0."""
    if min(tp, tn, fp, fn) < 0:
        raise DataError("confusion counts must be non-negative")
    total = tp + tn + fp + fn
    if total == 0:
        raise DataError("cannot compute rates from an empty confusion matrix")
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return (tp + tn) / total, precision, recall, f1


def mcc(tp: int, tn: int, fp: int, fn: int) -> float:
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(den)


def _split_classes(scored: Sequence[ScoredLabel], what: str) -> tuple[np.ndarray, np.ndarray]:
    scores, labels = _arrays(scored)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise DataError(f"{what} needs at least one positive and one negative sample")
    return pos, neg


def auc_roc(scored: Sequence[ScoredLabel]) -> float:
    """Mann-Whitney estimate: wins over all positive/negative pairs, ties count half."""
    pos, neg = _split_classes(scored, "AUC-ROC")
    wins = _kernels.pair_wins(np.ascontiguousarray(pos), np.sort(neg))
    return float(wins) / (pos.size * neg.size)


def ks_statistic(scored: Sequence[ScoredLabel]) -> float:
    """Largest gap between the empirical score CDFs of the two classes."""
    pos, neg = _split_classes(scored, "KS statistic")
    grid = np.unique(np.concatenate([pos, neg]))
    f_pos = np.searchsorted(np.sort(pos), grid, side="right") / pos.size
    f_neg = np.searchsorted(np.sort(neg), grid, side="right") / neg.size
    return float(np.max(np.abs(f_pos - f_neg)))


def top_k_positive_rate(scored: Sequence[ScoredLabel], k: int = 30) -> float:
    """Fraction of label-1 samples among the k highest scores (ties: id ascending)."""
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if len(scored) < k:
        raise DataError(f"top-{k} needs at least {k} samples, got {len(scored)}")
    ranked = sorted(scored, key=lambda s: (-s.score, s.id))
    return sum(s.label for s in ranked[:k]) / k


def cross_entropy_metric(scored: Sequence[ScoredLabel], eps: float = 1e-12) -> float:
    if not scored:
        raise DataError("cross-entropy of an empty sample")
    scores, labels = _arrays(scored)
    p = np.clip(scores, eps, 1.0 - eps)
    return float(np.mean(-(labels * np.log(p) + (1 - labels) * np.log(1.0 - p))))


def fold_enrichment(tp: int, fp: int, fn: int, tn: int) -> float:
    """Precision divided by prevalence."""
    if tp + fp == 0:
        raise DataError("fold-enrichment undefined: no predicted positives")
    if tp + fn == 0:
        raise DataError("fold-enrichment undefined: no positives in the population")
    total = tp + fp + fn + tn
    return (tp / (tp + fp)) / ((tp + fn) / total)


@dataclass(frozen=True)
class MetricReport:
    n: int
    tp: int
    tn: int
    fp: int
    fn: int
    auc_roc: float | None
    accuracy: float
    precision: float
    recall: float
    f1: float
    mcc: float
    top_k: float | None
    cross_entropy: float
    ks: float | None

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> dict:
        return asdict(self)


def build_report(scored: Sequence[ScoredLabel], threshold: float = 0.5, k: int = 30) -> MetricReport:
    """All metrics for one evaluation. AUC/KS are ``None`` when a class is
    missing; top-k is ``None`` with fewer than k samples."""
    if not scored:
        raise DataError("cannot build a report from an empty sample")
    tp, tn, fp, fn = confusion(scored, threshold)
    acc, prec, rec, f1 = basic_rates(tp, tn, fp, fn)
    labels = {s.label for s in scored}
    both = labels == {0, 1}
    return MetricReport(
        n=len(scored),
        tp=tp, tn=tn, fp=fp, fn=fn,
        auc_roc=auc_roc(scored) if both else None,
        accuracy=acc, precision=prec, recall=rec, f1=f1,
        mcc=mcc(tp, tn, fp, fn),
        top_k=top_k_positive_rate(scored, k) if len(scored) >= k else None,
        cross_entropy=cross_entropy_metric(scored),
        ks=ks_statistic(scored) if both else None,
    )


def aggregate(reports: Sequence[MetricReport]) -> tuple[dict, dict]:
    """Per-field mean and population std, skipping absent values."""
    mean, std = {}, {}
    for name in MetricReport.columns():
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if vals:
            arr = np.asarray(vals, dtype=np.float64)
            # shift first so identical repeats give exactly their value and zero spread
            dev = arr - arr[0]
            mean[name], std[name] = float(arr[0] + dev.mean()), float(dev.std())
        else:
            mean[name] = std[name] = None
    return mean, std


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return repr(float(v))


def reports_to_csv(reports: Sequence[MetricReport]) -> str:
    """One row per repeat, then ``mean`` and ``std`` rows."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    cols = MetricReport.columns()
    writer.writerow(["repeat", *cols])
    for i, r in enumerate(reports):
        writer.writerow([i, *(_fmt(getattr(r, c)) for c in cols)])
    mean, std = aggregate(reports)
    writer.writerow(["mean", *(_fmt(mean[c]) for c in cols)])
    writer.writerow(["std", *(_fmt(std[c]) for c in cols)])
    return buf.getvalue()
