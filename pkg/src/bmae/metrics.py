"""Multi-label ranking metrics: class-wise AP / mAP, macro AUROC, top-1 accuracy."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


class SkippedClass(ValueError):
    """The metric is undefined for this class (no positives, or one class only)."""


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape[0]} vs {y.shape[0]}")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, y


def average_precision(scores, labels) -> float:
    """Mean over positives of the precision at that positive's rank.

    Ranking is by descending score; equal scores keep input order.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise SkippedClass("no positive instances")
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.flatnonzero(hits) + 1
    precision_at_hit = np.arange(1, n_pos + 1) / ranks
    return float(precision_at_hit.sum() / n_pos)


def auroc(scores, labels) -> float:
    """P(score_pos > score_neg) over all positive/negative pairs, ties count 1/2."""
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SkippedClass("needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def top1_acc(scores, labels) -> tuple[float, int]:
    """Fraction of rows whose highest-scoring class is a true label.

    Rows without any true label are left out; their count is returned too.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.ndim != 2 or s.shape != y.shape:
        raise ValueError(f"expected matching N x C matrices, got {s.shape} and {y.shape}")
    has_label = y.any(axis=1)
    excluded = int((~has_label).sum())
    if not has_label.any():
        return float("nan"), excluded
    top = np.argmax(s[has_label], axis=1)
    hit = y[has_label][np.arange(top.size), top]
    return float(hit.mean()), excluded


@dataclass
class EvalReport:
    per_class_ap: list[float | None]
    per_class_auroc: list[float | None]
    map: float
    auroc: float
    top1: float
    skipped_ap: list[int] = field(default_factory=list)
    skipped_auroc: list[int] = field(default_factory=list)
    rows_without_labels: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        lines = [f"{'class':>5}  {'AP':>8}  {'AUROC':>8}"]
        for c, (ap, au) in enumerate(zip(self.per_class_ap, self.per_class_auroc)):
            ap_s = f"{ap:8.4f}" if ap is not None else "    skip"
            au_s = f"{au:8.4f}" if au is not None else "    skip"
            lines.append(f"{c:>5}  {ap_s}  {au_s}")
        lines.append(f"{'macro':>5}  {self.map:8.4f}  {self.auroc:8.4f}")
        lines.append(f"T1-Acc {self.top1:.4f}")
        if self.skipped_ap:
            lines.append(f"classes without positives: {self.skipped_ap}")
        return "\n".join(lines)


def evaluate_all(scores, labels) -> EvalReport:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.ndim != 2 or s.shape != y.shape:
        raise ValueError(f"expected matching N x C matrices, got {s.shape} and {y.shape}")
    aps: list[float | None] = []
    aucs: list[float | None] = []
    skip_ap: list[int] = []
    skip_auc: list[int] = []
    for c in range(s.shape[1]):
        try:
            aps.append(average_precision(s[:, c], y[:, c]))
        except SkippedClass:
            aps.append(None)
            skip_ap.append(c)
        try:
            aucs.append(auroc(s[:, c], y[:, c]))
        except SkippedClass:
            aucs.append(None)
            skip_auc.append(c)
    kept_ap = [a for a in aps if a is not None]
    kept_auc = [a for a in aucs if a is not None]
    t1, excluded = top1_acc(s, y)
    return EvalReport(
        per_class_ap=aps,
        per_class_auroc=aucs,
        map=float(np.mean(kept_ap)) if kept_ap else float("nan"),
        auroc=float(np.mean(kept_auc)) if kept_auc else float("nan"),
        top1=t1,
        skipped_ap=skip_ap,
        skipped_auroc=skip_auc,
        rows_without_labels=excluded,
    )
