"""Patch benchmark metrics: FPR at 95% recall and (mean) average precision.

Rankings sort by ascending distance with a stable sort, so equal distances
keep their input order.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .exceptions import FormatError

__all__ = [
    "all_pairs_fpr95",
    "average_precision",
    "evaluate_matching",
    "evaluate_retrieval",
    "evaluate_verification",
    "fpr_at_95",
    "mean_average_precision",
    "normalize_rows",
    "read_label_csv",
]


def fpr_at_95(scores, is_match, similarity: bool = False) -> float:
    """False positive rate at the smallest distance threshold reaching 95% recall.

    Pairs at exactly the threshold count as accepted. With
    ``similarity=True`` larger scores mean closer pairs.
    """
    d = np.asarray(scores, dtype=np.float64)
    y = np.asarray(is_match, dtype=bool)
    if d.shape != y.shape or d.ndim != 1:
        raise ValueError(f"scores {d.shape} and labels {y.shape} must be equal-length vectors")
    if similarity:
        d = -d
    pos, neg = np.sort(d[y]), d[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("need at least one positive and one negative pair")
    # smallest k with k / P >= 0.95, in exact integer arithmetic
    k = (95 * len(pos) + 99) // 100
    threshold = pos[k - 1]
    return float(np.count_nonzero(neg <= threshold)) / len(neg)


def average_precision(relevance, n_relevant: int | None = None) -> float:
    """Non-interpolated AP of a ranked boolean list.

    ``n_relevant`` overrides the denominator when relevant items may be
    missing from the list (they then count as never retrieved).
    """
    rel = np.asarray(relevance, dtype=bool)
    total = int(rel.sum()) if n_relevant is None else int(n_relevant)
    if total <= 0:
        raise ValueError("average precision needs at least one relevant item")
    hits = np.cumsum(rel)
    ranks = np.flatnonzero(rel) + 1
    return float(np.sum(hits[rel] / ranks)) / total


def mean_average_precision(ranked_lists) -> float:
    aps = [average_precision(r) for r in ranked_lists]
    if not aps:
        raise ValueError("no queries to evaluate")
    return float(np.mean(aps))


def all_pairs_fpr95(descriptors, labels) -> float:
    """FPR@95 over every unordered pair of a labelled descriptor set."""
    x = normalize_rows(descriptors)
    labels = np.asarray(labels)
    i, j = np.triu_indices(len(x), 1)
    dist = np.linalg.norm(x[i] - x[j], axis=1)
    return fpr_at_95(dist, labels[i] == labels[j])


def normalize_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ArithmeticError("cannot normalize an all-zero descriptor")
    return x / norms


def read_label_csv(path, columns) -> list[tuple]:
    """Read a label CSV; header row optional. Last column is a 0/1 flag."""
    rows = []
    try:
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or row[0].startswith("#"):
                    continue
                if lineno == 1 and [c.strip() for c in row] == list(columns):
                    continue
                if len(row) != len(columns):
                    raise FormatError(f"{path}:{lineno}: expected {len(columns)} columns, got {len(row)}")
                *keys, flag = (c.strip() for c in row)
                if flag not in ("0", "1"):
                    raise FormatError(f"{path}:{lineno}: flag must be 0 or 1, got {flag!r}")
                rows.append((*keys, flag == "1"))
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: no label rows")
    return rows


class _Lookup:
    """Resolve label ids to descriptor rows: names if given, else integer indices."""

    def __init__(self, descriptors, names=None):
        self.x = normalize_rows(descriptors)
        self.names = None if names is None else {name: i for i, name in enumerate(names)}

    def __call__(self, key: str) -> np.ndarray:
        if self.names is not None and key in self.names:
            return self.x[self.names[key]]
        try:
            i = int(key)
        except ValueError:
            raise FormatError(f"unknown descriptor id {key!r}") from None
        if not 0 <= i < len(self.x):
            raise FormatError(f"descriptor index {i} out of range (have {len(self.x)})")
        return self.x[i]


def _report(metric, value, **counts) -> dict:
    return {"metric": metric, "value": float(value), "counts": counts}


def evaluate_verification(descriptors, pairs, names=None) -> list[dict]:
    """AP and FPR@95 of labelled pairs ranked by descriptor distance.

    ``pairs`` is a CSV path or a list of ``(id_a, id_b, is_match)``.
    """
    if isinstance(pairs, (str, Path)):
        pairs = read_label_csv(pairs, ("id_a", "id_b", "is_match"))
    get = _Lookup(descriptors, names)
    dist = np.array([np.linalg.norm(get(a) - get(b)) for a, b, _ in pairs])
    labels = np.array([m for *_, m in pairs], dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise FormatError("verification labels need both matching and non-matching pairs")
    order = np.argsort(dist, kind="stable")
    return [
        _report("verification_ap", average_precision(labels[order]), positives=n_pos, negatives=n_neg),
        _report("fpr95", fpr_at_95(dist, labels), positives=n_pos, negatives=n_neg),
    ]


def _grouped(rows):
    groups = {}
    for row in rows:
        groups.setdefault(row[0], []).append(row[1:])
    return groups


def evaluate_retrieval(descriptors, labels, names=None) -> list[dict]:
    """mAP over queries, each ranking its candidate pool by distance.

    ``labels`` is a CSV path or ``(query_id, pool_id, is_relevant)`` rows.
    """
    if isinstance(labels, (str, Path)):
        labels = read_label_csv(labels, ("query_id", "pool_id", "is_relevant"))
    get = _Lookup(descriptors, names)
    ranked = []
    for query, pool in _grouped(labels).items():
        q = get(query)
        dist = np.array([np.linalg.norm(q - get(item)) for item, _ in pool])
        rel = np.array([r for _, r in pool], dtype=bool)
        if not rel.any():
            raise FormatError(f"query {query!r} has no relevant pool item")
        ranked.append(rel[np.argsort(dist, kind="stable")])
    if not ranked:
        raise FormatError("empty query pool")
    return [_report("retrieval_map", mean_average_precision(ranked), queries=len(ranked),
                    pool_items=len(labels))]


def evaluate_matching(descriptors, labels, names=None) -> list[dict]:
    """Nearest-neighbour matching mAP over image pairs.

    ``labels`` rows are ``(group, query_id, candidate_id, is_correspondence)``.
    Within a group every query is matched to its nearest candidate; the
    matches are ranked by distance and scored by AP, where correct means the
    chosen candidate is a true correspondence. The denominator is the number
    of queries that have a correspondence at all.
    """
    if isinstance(labels, (str, Path)):
        labels = read_label_csv(labels, ("group", "query_id", "candidate_id", "is_correspondence"))
    get = _Lookup(descriptors, names)
    aps = []
    for group, rows in _grouped(labels).items():
        best = []
        with_truth = 0
        for query, cands in _grouped(rows).items():
            q = get(query)
            dist = np.array([np.linalg.norm(q - get(c)) for c, _ in cands])
            j = int(np.argmin(dist))
            best.append((dist[j], cands[j][1]))
            with_truth += any(r for _, r in cands)
        if with_truth == 0:
            raise FormatError(f"group {group!r} has no ground-truth correspondence")
        order = sorted(range(len(best)), key=lambda i: best[i][0])
        aps.append(average_precision([best[i][1] for i in order], n_relevant=with_truth))
    if not aps:
        raise FormatError("empty matching label set")
    return [_report("matching_map", float(np.mean(aps)), groups=len(aps), rows=len(labels))]
