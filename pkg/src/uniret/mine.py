"""Hard-negative mining with retrieval-based query filtering.

Each query is searched against the index. A query none of whose positives
shows up in the top ``top_n`` hits is dropped as unfindable. Surviving
queries get ``m_out`` negatives sampled uniformly, without replacement, from
the non-positive hits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import UsageError
from .featurize import Featurizer
from .index import EmbeddingIndex, batch_search
from .model import ModelParams, encode_matrix
from .records import QueryRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MineConfig:
    top_n: int = 100
    m_out: int = 20
    seed: int = 0
    drop_unfindable: bool = True

    def __post_init__(self):
        if self.top_n < 1 or self.m_out < 1:
            raise UsageError("top_n and m_out must be >= 1")


@dataclass
class MineReport:
    queries_in: int = 0
    dropped: int = 0
    emitted: int = 0
    negatives_padded: int = 0  # total shortfall below m_out across emitted queries
    missing_positive: int = 0  # dropped because no positive id is in the index
    dropped_ids: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "queries_in": self.queries_in,
            "queries_dropped": self.dropped,
            "queries_emitted": self.emitted,
            "negatives_padded": self.negatives_padded,
            "missing_positive": self.missing_positive,
        }

    def summary(self) -> str:
        return "\n".join(f"{k}: {v}" for k, v in self.as_dict().items())


def mine_embeddings(query_embeddings: np.ndarray, queries: Sequence[QueryRecord], index: EmbeddingIndex,
                    cfg: MineConfig, threads: int = 1) -> tuple[list[QueryRecord], MineReport]:
    """Mining core over precomputed query embeddings (one row per query)."""
    report = MineReport(queries_in=len(queries))
    if not queries:
        return [], report
    indexed = set(index.docids)
    hits = batch_search(index, query_embeddings, cfg.top_n, threads=threads)
    out = []
    for i, (q, qhits) in enumerate(zip(queries, hits)):
        positives = set(q.positive_document_ids)
        if not positives & indexed:
            logger.warning("query %s: no positive id is in the index; dropped", q.query_id)
            report.missing_positive += 1
            report.dropped += 1
            report.dropped_ids.append(q.query_id)
            continue
        hit_ids = [h.docid for h in qhits]
        if cfg.drop_unfindable and not positives.intersection(hit_ids):
            report.dropped += 1
            report.dropped_ids.append(q.query_id)
            continue
        eligible = [d for d in hit_ids if d not in positives]
        if len(eligible) > cfg.m_out:
            rng = np.random.default_rng([cfg.seed, i])
            picks = np.sort(rng.choice(len(eligible), size=cfg.m_out, replace=False))
            negatives = tuple(eligible[j] for j in picks)
        else:
            negatives = tuple(eligible)
            report.negatives_padded += cfg.m_out - len(eligible)
        out.append(replace(q, negative_document_ids=negatives))
        report.emitted += 1
    return out, report


def mine(params: ModelParams, queries: Sequence[QueryRecord], index: EmbeddingIndex, cfg: MineConfig,
         featurizer: Featurizer | None = None, threads: int = 1) -> tuple[list[QueryRecord], MineReport]:
    """Encode ``queries`` with ``params`` and mine negatives from ``index``.

    Negatives already on a query are replaced. Emitted negatives keep the
    hits' rank order.
    """
    if index.dim != params.dim:
        raise UsageError(f"index dim {index.dim} does not match model dim {params.dim}")
    featurizer = featurizer or Featurizer(params.width)
    queries = list(queries)
    E = encode_matrix(params, featurizer.matrix(queries, threads)) if queries else np.empty((0, params.dim))
    return mine_embeddings(E, queries, index, cfg, threads)
