"""Nearest vocabulary words for learned context vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass
class NearestWordReport:
    label: str
    metric: str
    neighbors: list  # per context vector: [(word, distance), ...] ascending

    def lines(self):
        out = [f"[{self.label}, {self.metric}]"]
        for i, row in enumerate(self.neighbors, start=1):
            out.append(f"  v{i}: " + "  ".join(f"{w} ({dist:.4f})" for w, dist in row))
        return out


def nearest_words(vectors, vocab, n=1, metric="euclidean", label="V"):
    """The ``n`` closest vocabulary words to each row of ``vectors``.

    ``n`` larger than the vocabulary returns the whole vocabulary, sorted.
    """
    if n < 1:
        raise ValidationError(f"n must be >= 1, got {n}")
    if len(vocab) == 0:
        raise ValidationError("empty vocabulary")
    X = np.asarray(getattr(vectors, "data", vectors), dtype=np.float64)
    E = vocab.table
    if metric == "euclidean":
        dist = np.sqrt(np.maximum(0.0, ((X[:, None, :] - E[None, :, :]) ** 2).sum(-1)))
    elif metric == "cosine":
        # a zero vector has no direction; treat it as orthogonal to everything
        denom = np.linalg.norm(X, axis=1, keepdims=True) * np.linalg.norm(E, axis=1, keepdims=True).T
        cos = np.divide(X @ E.T, denom, out=np.zeros((len(X), len(E))), where=denom > 0)
        dist = np.maximum(0.0, 1.0 - cos)
    else:
        raise ValidationError(f"unknown metric {metric!r}")
    k = min(n, len(vocab))
    rows = []
    for drow in dist:
        order = np.argsort(drow, kind="stable")[:k]
        rows.append([(vocab.words[j], float(drow[j])) for j in order])
    return NearestWordReport(label=label, metric=metric, neighbors=rows)
