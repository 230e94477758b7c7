"""Cosine-distance leave-one-out retrieval with mAP and hard TOP-k scoring.

Every document queries the corpus with itself removed; a returned
document is relevant when it shares the query's writer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from writerid.encoding import GlobalDescriptor

logger = logging.getLogger(__name__)


@dataclass
class RankedList:
    query_doc_id: str
    query_writer_id: str
    entries: list[tuple[str, float]]  # (doc_id, distance), distance ascending
    relevance: list[bool]

    @property
    def n_relevant(self) -> int:
        return sum(self.relevance)


@dataclass
class EvalReport:
    mean_ap: float
    hard_top_k: dict[int, float]
    per_query_ap: list[tuple[str, float]] = field(default_factory=list)
    n_queries: int = 0


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cos(a, b), in [0, 2]; pairs involving a zero vector score 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        logger.warning("cosine distance of a zero vector defined as 1")
        return 1.0
    return float(np.clip(1.0 - a @ b / (na * nb), 0.0, 2.0))


def rank_all(descriptors: list[GlobalDescriptor]) -> list[RankedList]:
    """Leave-one-out ranking of every document against all others.

    Candidates are sorted by ascending cosine distance; exact distance
    ties break by doc_id so rankings are deterministic.
    """
    if len(descriptors) < 2:
        raise ValueError("need at least 2 documents to rank")
    mat = np.stack([np.asarray(d.vector, dtype=np.float64) for d in descriptors])
    norms = np.linalg.norm(mat, axis=1)
    zero = norms == 0
    if zero.any():
        logger.warning("%d zero descriptors; their distances default to 1", int(zero.sum()))
    unit = mat / np.where(zero, 1.0, norms)[:, None]
    dist = 1.0 - unit @ unit.T
    np.clip(dist, 0.0, 2.0, out=dist)
    dist[zero, :] = 1.0
    dist[:, zero] = 1.0

    rankings = []
    for i, query in enumerate(descriptors):
        order = sorted(
            (j for j in range(len(descriptors)) if j != i),
            key=lambda j: (dist[i, j], descriptors[j].doc_id),
        )
        entries = [(descriptors[j].doc_id, float(dist[i, j])) for j in order]
        relevance = [descriptors[j].writer_id == query.writer_id for j in order]
        rankings.append(
            RankedList(
                query_doc_id=query.doc_id,
                query_writer_id=query.writer_id,
                entries=entries,
                relevance=relevance,
            )
        )
    return rankings


def average_precision(ranked: RankedList) -> float:
    """aP = sum_k P(k) rel(k) / #relevant, P(k) = relevant-in-top-k / k."""
    n_rel = ranked.n_relevant
    if n_rel == 0:
        raise ValueError(f"query {ranked.query_doc_id!r} has no relevant documents")
    hits = 0
    total = 0.0
    for rank, rel in enumerate(ranked.relevance, start=1):
        if rel:
            hits += 1
            total += hits / rank
    return total / n_rel


def hard_top_k(rankings: list[RankedList], k: int) -> float:
    """Fraction of queries whose k best-ranked documents are all relevant.

    Queries with fewer than k relevant documents cannot satisfy the
    criterion and are excluded (logged).
    """
    eligible = 0
    passed = 0
    for ranked in rankings:
        if ranked.n_relevant < k:
            logger.debug(
                "query %s excluded from hard TOP-%d (%d relevant)",
                ranked.query_doc_id, k, ranked.n_relevant,
            )
            continue
        eligible += 1
        if all(ranked.relevance[:k]):
            passed += 1
    if eligible == 0:
        raise ValueError(f"no query has {k} relevant documents")
    return passed / eligible


def evaluate(descriptors: list[GlobalDescriptor]) -> EvalReport:
    """Full leave-one-out evaluation: mAP and hard TOP-k for k = 1..max relevant.

    Queries without any relevant document are excluded from the mAP and
    logged. The TOP-k curve is non-increasing whenever all queries share
    the same relevant count (the usual benchmark layout).
    """
    rankings = rank_all(descriptors)
    per_query = []
    for ranked in rankings:
        if ranked.n_relevant == 0:
            logger.warning("query %s has no relevant documents; excluded", ranked.query_doc_id)
            continue
        per_query.append((ranked.query_doc_id, average_precision(ranked)))
    if not per_query:
        raise ValueError("no query has any relevant document")
    mean_ap = float(np.mean([ap for _, ap in per_query]))
    max_rel = max(r.n_relevant for r in rankings)
    top_k = {k: hard_top_k(rankings, k) for k in range(1, max_rel + 1)}
    return EvalReport(
        mean_ap=mean_ap,
        hard_top_k=top_k,
        per_query_ap=per_query,
        n_queries=len(per_query),
    )
