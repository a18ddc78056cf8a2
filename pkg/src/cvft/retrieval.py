"""Retrieval metrics: recall at K, recall at top 1%, and geo-localization recall.

Ties are pessimistic everywhere: a gallery item at exactly the same distance
as the true match is ranked ahead of it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import EmbeddingVector
from .errors import EmptyQuerySet, IndexOutOfRange, MissingGeoTags, ValidationError

DEFAULT_KS = (1, 5, 10)


@dataclass
class GalleryIndex:
    embeddings: np.ndarray
    geo_tags: np.ndarray | None = None

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        if self.embeddings.shape[0] < 1:
            raise ValidationError("gallery must hold at least one item")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValidationError("gallery embeddings must be L2-normalized")
        if self.geo_tags is not None:
            self.geo_tags = np.asarray(self.geo_tags, dtype=np.float64)
            if self.geo_tags.shape != (len(self), 2):
                raise ValidationError(f"geo_tags must be ({len(self)}, 2), got {self.geo_tags.shape}")

    def __len__(self):
        return self.embeddings.shape[0]

    def distances(self, queries: np.ndarray) -> np.ndarray:
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        return np.sqrt(np.sum((q[:, None, :] - self.embeddings[None, :, :]) ** 2, axis=-1))


@dataclass
class RecallReport:
    r_at: dict[int, float]
    top1_percent: float
    top1_percent_k: int
    geo_recall_at: dict[int, float] | None = None
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[tuple[str, int, float]]:
        out = [("r@K", k, v) for k, v in sorted(self.r_at.items())]
        out.append(("r@1%", self.top1_percent_k, self.top1_percent))
        if self.geo_recall_at:
            out += [("geo@K", k, v) for k, v in sorted(self.geo_recall_at.items())]
        return out


def rank_of_match(query, gallery: GalleryIndex, true_index: int) -> int:
    """1-based rank of the true match; ties count ahead of it."""
    if not 0 <= true_index < len(gallery):
        raise IndexOutOfRange(f"true index {true_index} outside gallery of {len(gallery)}")
    q = query.data if isinstance(query, EmbeddingVector) else np.asarray(query, dtype=np.float64)
    d = gallery.distances(q)[0]
    others = np.delete(d, true_index)
    return 1 + int(np.count_nonzero(others <= d[true_index]))


def ranks_from_distances(D: np.ndarray, true_index: Sequence[int] | None = None) -> np.ndarray:
    """Ranks for every query row of a query x gallery distance matrix.

    Without ``true_index`` query ``i`` is assumed to match gallery item ``i``.
    """
    D = np.asarray(D, dtype=np.float64)
    idx = np.arange(D.shape[0]) if true_index is None else np.asarray(true_index)
    if idx.size and (idx.min() < 0 or idx.max() >= D.shape[1]):
        raise IndexOutOfRange("true index outside gallery")
    d_true = D[np.arange(D.shape[0]), idx]
    ahead = np.count_nonzero(D <= d_true[:, None], axis=1) - 1
    return 1 + ahead


def top1_percent_k(n: int) -> int:
    return max(1, math.ceil(n / 100))


def recall_at_k(ranks: Iterable[int], ks: Iterable[int] = DEFAULT_KS, n: int | None = None) -> RecallReport:
    """Fraction of queries ranked within each K; r@1% uses ``K = ceil(N / 100)``."""
    r = np.asarray(list(ranks), dtype=np.int64)
    if r.size == 0:
        raise EmptyQuerySet("no queries to evaluate")
    if np.any(r < 1):
        raise ValidationError("ranks are 1-based")
    n = int(r.max()) if n is None else int(n)
    kp = top1_percent_k(n)
    return RecallReport({int(k): float(np.mean(r <= k)) for k in ks}, float(np.mean(r <= kp)), kp)


def top_k_lists(D: np.ndarray, k: int) -> np.ndarray:
    """Gallery indices of the ``k`` nearest items per query, nearest first (stable)."""
    return np.argsort(D, axis=1, kind="stable")[:, :k]


def geo_recall(query_tags, gallery: GalleryIndex, top_lists, d_meters: float = 25.0,
               ks: Iterable[int] = DEFAULT_KS) -> dict[int, float]:
    """Fraction of queries with any of the first K retrieved items within ``d_meters``."""
    if gallery.geo_tags is None or query_tags is None:
        raise MissingGeoTags("geo recall needs geo tags on queries and gallery")
    q = np.asarray(query_tags, dtype=np.float64)
    if len(q) == 0:
        raise EmptyQuerySet("no queries to evaluate")
    out = {}
    for k in ks:
        hits = 0
        for tag, lst in zip(q, top_lists):
            cand = gallery.geo_tags[np.asarray(lst[:k], dtype=np.int64)]
            if cand.size and np.min(np.linalg.norm(cand - tag, axis=1)) <= d_meters:
                hits += 1
        out[int(k)] = hits / len(q)
    return out


def evaluate_embeddings(queries: np.ndarray, gallery: GalleryIndex, ks=DEFAULT_KS,
                        query_tags=None, d_meters: float = 25.0) -> RecallReport:
    """Full report for query ``i`` matching gallery item ``i``."""
    D = gallery.distances(queries)
    report = recall_at_k(ranks_from_distances(D), ks, len(gallery))
    if query_tags is not None and gallery.geo_tags is not None:
        lists = top_k_lists(D, max(ks))
        report.geo_recall_at = geo_recall(query_tags, gallery, lists, d_meters, ks)
    return report
