"""Classification metrics, L2 retrieval mAP and face-count grouping."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .mesh_io import DatasetRecord
from .preprocess import stack


@dataclass
class FaceCountGroup:
    low: int
    high: int
    count: int
    proportion: float
    accuracy: float
    closed: bool = False

    @property
    def label(self) -> str:
        return f"[{self.low}, {self.high}{']' if self.closed else ')'}"


@dataclass
class EvalReport:
    overall_accuracy: float
    per_class_accuracy: list[float]
    mAP: float
    face_count_groups: list[FaceCountGroup] = field(default_factory=list)
    loss: float = float("nan")
    num_samples: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_accuracy"] = [None if math.isnan(a) else a for a in self.per_class_accuracy]
        for key in ("mAP", "loss"):
            if math.isnan(d[key]):
                d[key] = None
        for g, grp in zip(d["face_count_groups"], self.face_count_groups):
            g["label"] = grp.label
        return d


def predict(model, records: Sequence[DatasetRecord], batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode logits and global features for ``records``, in order."""
    logits, feats = [], []
    with T.no_grad():
        for i in range(0, len(records), batch_size):
            batch = stack([r.face_set for r in records[i:i + batch_size]])
            lg, g = model.forward(batch, training=False)
            logits.append(lg.data)
            feats.append(g.data)
    return np.concatenate(logits), np.concatenate(feats)


def per_class_accuracy(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> list[float]:
    out = []
    for c in range(num_classes):
        mask = labels == c
        out.append(float((pred[mask] == c).mean()) if mask.any() else float("nan"))
    return out


def face_count_groups(face_counts, correct, budget: int = 1024, interval: int = 200) -> list[FaceCountGroup]:
    """Accuracy per face-count bin of width ``interval``.

    Bins are [0, interval), [interval, 2*interval), ...; the top bin is
    closed so that it holds ``budget`` itself. Empty bins are omitted.
    """
    counts = np.asarray(face_counts)
    correct = np.asarray(correct, dtype=bool)
    if len(counts) == 0:
        return []
    lows = list(range(0, budget, interval)) or [0]
    groups = []
    for k, lo in enumerate(lows):
        last = k == len(lows) - 1
        if last:
            hi = max(budget, int(counts.max()))
            mask = (counts >= lo) & (counts <= hi)
        else:
            hi = lows[k + 1]
            mask = (counts >= lo) & (counts < hi)
        if mask.any():
            groups.append(FaceCountGroup(lo, hi, int(mask.sum()), float(mask.mean()), float(correct[mask].mean()), last))
    return groups


def average_precision(ranked_relevance: np.ndarray) -> float | None:
    """AP of one ranked list of 0/1 relevance flags; None when nothing is relevant."""
    hits = np.flatnonzero(ranked_relevance)
    if hits.size == 0:
        return None
    precisions = (np.arange(1, hits.size + 1) / (hits + 1)).tolist()
    return math.fsum(precisions) / hits.size


def retrieval_ranking(embeddings: np.ndarray, query: int) -> np.ndarray:
    """Indices of all other samples by ascending L2 distance to ``query``.

    Ties keep index order.
    """
    diff = embeddings - embeddings[query]
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.argsort(d2, kind="stable")
    return order[order != query]


def retrieval_map(embeddings: np.ndarray, labels, return_per_query: bool = False):
    """Leave-one-out mean average precision of L2 retrieval.

    Each sample queries all others; same-label items are relevant. Queries
    with no relevant item are excluded from the mean.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(emb)
    if n < 2:
        raise ValueError("retrieval needs at least 2 samples")
    aps = []
    for q in range(n):
        order = retrieval_ranking(emb, q)
        aps.append(average_precision(labels[order] == labels[q]))
    valid = [a for a in aps if a is not None]
    m = math.fsum(valid) / len(valid) if valid else float("nan")
    return (m, aps) if return_per_query else m


def precision_recall_curve(embeddings: np.ndarray, labels, levels: int = 11) -> tuple[np.ndarray, np.ndarray]:
    """Interpolated precision at evenly spaced recall levels, averaged over queries."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    recall = np.linspace(0, 1, levels)
    curves = []
    for q in range(len(emb)):
        rel = labels[retrieval_ranking(emb, q)] == labels[q]
        if not rel.any():
            continue
        tp = np.cumsum(rel)
        prec = tp / np.arange(1, len(rel) + 1)
        rec = tp / rel.sum()
        interp = np.maximum.accumulate(prec[::-1])[::-1]
        curves.append([interp[rec >= r].max() if (rec >= r).any() else 0.0 for r in recall])
    return recall, np.mean(curves, axis=0) if curves else np.zeros(levels)


def report_from_outputs(logits, embeddings, labels, face_counts, num_classes: int, budget: int = 1024) -> EvalReport:
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    pred = np.argmax(logits, axis=1)
    correct = pred == labels
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    mAP = retrieval_map(embeddings, labels) if len(labels) >= 2 else float("nan")
    return EvalReport(
        overall_accuracy=float(correct.mean()),
        per_class_accuracy=per_class_accuracy(pred, labels, num_classes),
        mAP=float(mAP),
        face_count_groups=face_count_groups(face_counts, correct, budget),
        loss=loss,
        num_samples=len(labels),
    )


def evaluate(records: Sequence[DatasetRecord], model, num_classes: int | None = None, batch_size: int = 16) -> EvalReport:
    if not records:
        raise ValueError("empty evaluation set")
    if num_classes is None:
        num_classes = model.config.num_classes
    logits, emb = predict(model, records, batch_size)
    labels = np.array([r.label for r in records])
    counts = np.array([r.face_count for r in records])
    return report_from_outputs(logits, emb, labels, counts, num_classes, budget=records[0].face_set.F)


def embed(records: Sequence[DatasetRecord], model, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Global features (N, fusion_width) as float32, plus labels."""
    _, emb = predict(model, records, batch_size)
    return emb.astype(np.float32), np.array([r.label for r in records], dtype=np.int64)


def format_report(report: EvalReport, class_names: Sequence[str] | None = None) -> str:
    lines = [
        f"samples          {report.num_samples}",
        f"overall accuracy {report.overall_accuracy:.4f}",
        f"retrieval mAP    {report.mAP:.4f}",
        f"loss             {report.loss:.4f}",
        "",
        f"{'faces':<14}{'proportion':>12}{'accuracy':>10}",
    ]
    for g in report.face_count_groups:
        lines.append(f"{g.label:<14}{g.proportion:>12.4f}{g.accuracy:>10.4f}")
    lines += ["", f"{'class':<24}{'accuracy':>10}"]
    for c, acc in enumerate(report.per_class_accuracy):
        name = class_names[c] if class_names else str(c)
        lines.append(f"{name:<24}{'-' if math.isnan(acc) else f'{acc:.4f}':>10}")
    return "\n".join(lines)
