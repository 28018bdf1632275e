"""Retrieval evaluation: query-to-gallery ranking, mAP, and CMC.

Rankings order the gallery by ascending Euclidean distance (ties broken
by gallery sample_id). Gallery entries sharing both identity and camera
with the query are junk: excluded from matches and from the candidate
list. Queries left without any valid relevant item are dropped from the
averages and counted.

``evaluate_reference`` is an intentionally separate implementation (plain
Python loops over an explicit sort) used to cross-check ``evaluate``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_CMC_RANKS = (1, 5, 10)


@dataclass
class EmbeddingRecord:
    sample_id: str
    identity: int
    camera: int
    vector: np.ndarray


@dataclass
class RankingResult:
    query_id: str
    order: list[str]        # gallery sample_ids, ascending distance
    distances: np.ndarray   # aligned with order
    matches: np.ndarray     # bool: same identity and not excluded
    excluded: np.ndarray    # bool: same identity AND same camera (junk)


@dataclass
class EvalResult:
    mAP: float
    cmc: dict[int, float]
    num_queries: int        # queries contributing to the averages
    dropped: int = 0        # queries with no valid relevant gallery item
    ap_per_query: dict[str, float] = field(default_factory=dict)


def _vector_matrix(records) -> np.ndarray:
    mat = np.asarray([r.vector for r in records], dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError("embedding vectors must share one length")
    if not np.isfinite(mat).all():
        raise ValueError("non-finite embedding vector")
    return mat


def distance_matrix(queries, gallery) -> np.ndarray:
    """Euclidean distances, queries x gallery."""
    q = _vector_matrix(queries)
    g = _vector_matrix(gallery)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape[1]} vs {g.shape[1]}")
    out = np.empty((len(q), len(g)))
    for i in range(0, len(q), 64):  # chunked to bound the diff tensor
        diff = q[i : i + 64, None, :] - g[None, :, :]
        out[i : i + 64] = np.sqrt((diff * diff).sum(-1))
    return out


def rank_queries(queries, gallery) -> list[RankingResult]:
    if not gallery:
        raise ValueError("empty gallery")
    dist = distance_matrix(queries, gallery)
    g_ids = np.asarray([g.sample_id for g in gallery])
    g_identity = np.asarray([g.identity for g in gallery])
    g_camera = np.asarray([g.camera for g in gallery])
    results = []
    for i, query in enumerate(queries):
        order = np.lexsort((g_ids, dist[i]))
        same_id = g_identity[order] == query.identity
        excluded = same_id & (g_camera[order] == query.camera)
        results.append(
            RankingResult(
                query_id=query.sample_id,
                order=[g_ids[j] for j in order],
                distances=dist[i][order],
                matches=same_id & ~excluded,
                excluded=excluded,
            )
        )
    return results


def evaluate(rankings, cmc_ranks=DEFAULT_CMC_RANKS) -> EvalResult:
    """mAP and CMC over a set of query rankings."""
    aps: dict[str, float] = {}
    cmc_hits = {k: 0 for k in cmc_ranks}
    dropped = 0
    for r in rankings:
        flags = r.matches[~r.excluded]
        n_rel = int(flags.sum())
        if n_rel == 0:
            dropped += 1
            continue
        hit_positions = np.flatnonzero(flags)  # 0-based ranks among valid entries
        precisions = (np.arange(1, n_rel + 1)) / (hit_positions + 1)
        aps[r.query_id] = float(precisions.sum() / n_rel)
        first_hit = hit_positions[0]
        for k in cmc_ranks:
            cmc_hits[k] += int(first_hit < k)
    n = len(aps)
    if n == 0:
        raise ValueError("no query has a valid relevant gallery item")
    return EvalResult(
        mAP=float(sum(aps.values()) / n),
        cmc={k: cmc_hits[k] / n for k in cmc_ranks},
        num_queries=n,
        dropped=dropped,
        ap_per_query=aps,
    )


def evaluate_reference(queries, gallery, cmc_ranks=DEFAULT_CMC_RANKS) -> EvalResult:
    """Brute-force reference: explicit loops, O(queries * gallery log gallery)."""
    aps: dict[str, float] = {}
    cmc_hits = {k: 0 for k in cmc_ranks}
    dropped = 0
    for query in queries:
        scored = []
        for g in gallery:
            acc = 0.0
            for a, b in zip(query.vector, g.vector):
                d = float(a) - float(b)
                acc += d * d
            scored.append((math.sqrt(acc), g.sample_id, g.identity, g.camera))
        scored.sort(key=lambda t: (t[0], t[1]))
        hits = 0
        precision_sum = 0.0
        rank = 0  # rank among non-junk entries
        first_hit = None
        total_rel = 0
        for _, _, ident, cam in scored:
            if ident == query.identity and cam == query.camera:
                continue  # junk: same identity seen by the same camera
            rank += 1
            if ident == query.identity:
                total_rel += 1
                hits += 1
                precision_sum += hits / rank
                if first_hit is None:
                    first_hit = rank
        if total_rel == 0:
            dropped += 1
            continue
        aps[query.sample_id] = precision_sum / total_rel
        for k in cmc_ranks:
            cmc_hits[k] += int(first_hit <= k)
    n = len(aps)
    if n == 0:
        raise ValueError("no query has a valid relevant gallery item")
    return EvalResult(
        mAP=sum(aps.values()) / n,
        cmc={k: cmc_hits[k] / n for k in cmc_ranks},
        num_queries=n,
        dropped=dropped,
        ap_per_query=aps,
    )
