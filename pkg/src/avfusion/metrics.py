"""Average precision, pooled top-k GAP and micro-F1.

Sorting is always by descending score with a deterministic tie order: item
index for a single list, ``(video id, class index)`` ascending for pooled
lists.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np


class UndefinedAPError(ValueError):
    """AP requested for a list with no relevant items."""


@dataclass
class PredictionSet:
    ids: list[str]
    scores: np.ndarray  # [n, C]
    labels: list[tuple[int, ...]]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ValueError(f"scores must be [n, C], got {self.scores.shape}")
        n, c = self.scores.shape
        if len(self.ids) != n or len(self.labels) != n:
            raise ValueError("ids, scores and labels disagree on the number of videos")
        if len(set(self.ids)) != n:
            raise ValueError("video ids must be unique")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        for labs in self.labels:
            if any(not 0 <= j < c for j in labs):
                raise ValueError(f"label index out of range for {c} classes")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def dense_labels(self) -> np.ndarray:
        y = np.zeros(self.scores.shape, dtype=bool)
        for i, labs in enumerate(self.labels):
            y[i, list(labs)] = True
        return y


def _ap_sorted(rel: np.ndarray, num_relevant: int) -> float:
    hits = np.cumsum(rel)
    precision_at_k = hits / np.arange(1, rel.size + 1)
    return float(np.sum(precision_at_k[rel]) / num_relevant)


def average_precision(scores: Sequence[float], relevance: Sequence[int], num_relevant: int | None = None) -> float:
    """Sum over cut-offs of precision times change in recall.

    ``num_relevant`` overrides the recall denominator (used when the list is a
    truncated view of a larger ranking).
    """
    s = np.asarray(scores, dtype=np.float64)
    r = np.asarray(relevance).astype(bool)
    if s.shape != r.shape or s.ndim != 1:
        raise ValueError("scores and relevance must be equal-length 1-D sequences")
    total = int(r.sum()) if num_relevant is None else int(num_relevant)
    if total <= 0:
        raise UndefinedAPError("average precision is undefined without relevant items")
    order = np.lexsort((np.arange(s.size), -s))
    return _ap_sorted(r[order], total)


def gap_at_k(p: PredictionSet, k: int = 20) -> float:
    """Global AP over the pooled per-video top-k predictions."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n, c = p.scores.shape
    if n == 0:
        raise ValueError("empty prediction set")
    k = min(k, c)
    y = p.dense_labels()
    total = int(y.sum())
    if total == 0:
        return 0.0
    cls = np.arange(c)
    rank_of_id = {vid: r for r, vid in enumerate(sorted(p.ids))}
    pooled_s, pooled_r, pooled_v, pooled_c = [], [], [], []
    for i in range(n):
        top = np.lexsort((cls, -p.scores[i]))[:k]
        pooled_s.append(p.scores[i, top])
        pooled_r.append(y[i, top])
        pooled_v.append(np.full(k, rank_of_id[p.ids[i]]))
        pooled_c.append(top)
    s = np.concatenate(pooled_s)
    order = np.lexsort((np.concatenate(pooled_c), np.concatenate(pooled_v), -s))
    return _ap_sorted(np.concatenate(pooled_r)[order], total)


def mean_class_ap(p: PredictionSet) -> float:
    """Mean per-class AP over classes that have at least one positive."""
    y = p.dense_labels()
    aps = [average_precision(p.scores[:, j], y[:, j]) for j in range(p.num_classes) if y[:, j].any()]
    return float(np.mean(aps)) if aps else 0.0


def f1_micro(p: PredictionSet, threshold: float = 0.5) -> tuple[float, float, float]:
    """Micro-averaged (f1, precision, recall); 0/0 is taken as 0."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if p.scores.shape[0] == 0:
        raise ValueError("empty prediction set")
    y = p.dense_labels()
    pred = p.scores >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return f1, precision, recall


@dataclass
class MetricReport:
    gap: float
    f1: float
    precision: float
    recall: float
    k: int
    threshold: float
    num_videos: int
    num_positive_labels: int
    mean_class_ap: float = 0.0
    f1_scheme: str = field(default="micro")

    def to_line(self) -> str:
        return json.dumps(asdict(self), separators=(", ", ": "))

    CSV_FIELDS = ("gap", "f1", "precision", "recall", "mean_class_ap", "k", "threshold", "f1_scheme",
                  "num_videos", "num_positive_labels")

    def csv_row(self) -> list:
        d = asdict(self)
        return [d[f] for f in self.CSV_FIELDS]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_FIELDS)
        w.writerow(self.csv_row())
        return buf.getvalue()


def report(p: PredictionSet, k: int = 20, threshold: float = 0.5) -> MetricReport:
    f1, prec, rec = f1_micro(p, threshold)
    return MetricReport(
        gap=gap_at_k(p, k),
        f1=f1,
        precision=prec,
        recall=rec,
        k=k,
        threshold=threshold,
        num_videos=len(p.ids),
        num_positive_labels=int(sum(len(l) for l in p.labels)),
        mean_class_ap=mean_class_ap(p),
    )


def predict(model, dataset, batch_size: int = 1024) -> PredictionSet:
    """Inference-mode scores for every record in ``dataset``."""
    from .models import forward

    chunks = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        chunks.append(forward(model, dataset.visual[sl], dataset.audio[sl], training=False).data)
    scores = np.concatenate(chunks) if chunks else np.zeros((0, model.spec.num_classes))
    return PredictionSet(list(dataset.ids), scores, list(dataset.labels))


def evaluate(model, dataset, k: int = 20, threshold: float = 0.5) -> MetricReport:
    s = model.spec
    if dataset.header.visual_dim != s.visual_dim or dataset.header.audio_dim != s.audio_dim \
            or dataset.header.num_classes != s.num_classes:
        raise ValueError(
            f"dataset dims (v={dataset.header.visual_dim}, a={dataset.header.audio_dim}, "
            f"c={dataset.header.num_classes}) do not match model {s.label}"
        )
    return report(predict(model, dataset), k, threshold)
