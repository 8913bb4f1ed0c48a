"""Accuracy reports, per-class gain breakdown, gain/label-count correlation,
and feature-space nearest-neighbour retrieval."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .data import TARGET, Dataset
from .errors import ContractError
from .model import ModelParams, predict_class_scores, predict_features

UNCHANGED_TOL = 1e-12


@dataclass
class EvalReport:
    accuracy: float
    per_class_accuracy: np.ndarray   # NaN for classes with no evaluated examples
    per_class_count: np.ndarray
    attribute_accuracy: dict[str, float]
    confusion: np.ndarray            # true x predicted counts
    classes: tuple[int, ...]

    def to_json(self) -> str:
        return json.dumps({
            "accuracy": self.accuracy,
            "classes": list(self.classes),
            "per_class_accuracy": [None if np.isnan(v) else float(v) for v in self.per_class_accuracy],
            "per_class_count": [int(v) for v in self.per_class_count],
            "attribute_accuracy": self.attribute_accuracy,
            "confusion": self.confusion.tolist(),
        }, indent=2)

    def to_csv(self, deltas: np.ndarray | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "n_examples", "accuracy", "delta"])
        for c in self.classes:
            d = "" if deltas is None else repr(float(deltas[c]))
            w.writerow([c, int(self.per_class_count[c]), repr(float(self.per_class_accuracy[c])), d])
        return buf.getvalue()


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    return np.argmax(scores, axis=1)  # numpy returns the first maximal index


def evaluate_predictions(pred: np.ndarray, truth: np.ndarray, schema, classes) -> EvalReport:
    """Accuracy over examples whose true class is in ``classes``."""
    classes = tuple(sorted(int(c) for c in classes))
    if not classes:
        raise ContractError("evaluation class subset is empty")
    k = schema.n_classes
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    keep = np.isin(truth, classes)
    pred, truth = pred[keep], truth[keep]
    if not len(truth):
        raise ContractError("no examples of the evaluated classes")
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (truth, pred), 1)
    counts = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(counts > 0, np.diag(conf) / np.maximum(counts, 1), np.nan)
    attr_acc = {}
    for a in schema.attributes:
        m = np.asarray(a.class_to_category)
        attr_acc[a.name] = float(np.mean(m[pred] == m[truth]))
    return EvalReport(float(np.mean(pred == truth)), per_class, counts, attr_acc, conf, classes)


def evaluate(params: ModelParams, dataset: Dataset, classes=None, domain: int | None = TARGET) -> EvalReport:
    """Full K-way argmax (ties to the lowest id), scored on the chosen class subset."""
    rows = np.flatnonzero(dataset.labels >= 0)
    if domain is not None:
        rows = rows[dataset.domain[rows] == domain]
    if classes is None:
        classes = range(dataset.schema.n_classes)
    scores = predict_class_scores(params, dataset.features[rows])
    return evaluate_predictions(argmax_lowest(scores), dataset.labels[rows], dataset.schema, classes)


@dataclass
class GainSummary:
    deltas: np.ndarray          # indexed by class id; NaN outside the evaluated set
    improved: float
    unchanged: float
    worse: float
    classes: tuple[int, ...]


def per_class_gain(before: EvalReport, after: EvalReport) -> GainSummary:
    if before.classes != after.classes:
        raise ContractError("reports cover different class sets")
    deltas = after.per_class_accuracy - before.per_class_accuracy
    d = deltas[list(before.classes)]
    d = d[~np.isnan(d)]
    if not d.size:
        raise ContractError("no class has evaluated examples in both reports")
    n = d.size
    up = int((d >= UNCHANGED_TOL).sum())
    down = int((d <= -UNCHANGED_TOL).sum())
    return GainSummary(deltas, up / n, (n - up - down) / n, down / n, before.classes)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ContractError("pearson needs two equal-length vectors of >= 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ContractError("correlation undefined: zero variance")
    return float(dx @ dy / np.sqrt(sxx * syy))


def gain_label_correlation(deltas, label_counts) -> float:
    deltas = np.asarray(deltas, dtype=np.float64)
    counts = np.asarray(label_counts, dtype=np.float64)
    ok = ~np.isnan(deltas)
    return pearson(counts[ok], deltas[ok])


def nearest_neighbors(params: ModelParams, queries: np.ndarray, gallery: np.ndarray, k: int):
    """Gallery indices ranked by L2 distance in feature space (ties: lower index).

    Returns ``(indices, distances)``, each ``n_queries x k``.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    gallery = np.asarray(gallery, dtype=np.float64)
    if not 1 <= k <= len(gallery):
        raise ContractError(f"k must be in [1, {len(gallery)}]")
    # one forward pass so a query that is also in the gallery maps bit-identically
    f = predict_features(params, np.concatenate([queries, gallery]))
    return rank_by_distance(f[:len(queries)], f[len(queries):], k)


def rank_by_distance(fq: np.ndarray, fg: np.ndarray, k: int):
    diff = fq[:, None, :] - fg[None, :, :]
    dist = np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return order, np.take_along_axis(dist, order, axis=1)
