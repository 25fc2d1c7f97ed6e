"""Recall@K and NDCG@K over a ranked item list."""
from __future__ import annotations

import math

from .errors import ValidationError


def _items(ranked):
    # RankedList or any sequence of item ids
    return getattr(ranked, "items", ranked)


def recall_at_k(ranked, ground_truth, k: int) -> float:
    gt = {int(v) for v in ground_truth}
    if not gt:
        raise ValidationError("ground truth is empty")
    top = [int(v) for v in list(_items(ranked))[:k]]
    return sum(1 for v in top if v in gt) / len(gt)


def ideal_dcg(n: int) -> float:
    return sum(1.0 / math.log2(p + 1) for p in range(1, n + 1))


def ndcg_at_k(ranked, ground_truth, k: int) -> float:
    gt = {int(v) for v in ground_truth}
    if not gt:
        raise ValidationError("ground truth is empty")
    top = [int(v) for v in list(_items(ranked))[:k]]
    dcg = sum(1.0 / math.log2(p + 1) for p, v in enumerate(top, start=1) if v in gt)
    return dcg / ideal_dcg(min(len(gt), k))
