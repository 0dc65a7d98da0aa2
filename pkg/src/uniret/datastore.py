"""Corpus store, training-group resolution, multi-dataset epoch planning and collation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DanglingDocId,
    DataError,
    DuplicateDocId,
    EmptyCorpusFallback,
    EmptyDataset,
    MediaReadError,
    UsageError,
)
from .featurize import Featurizer
from .records import CorpusRecord, QueryRecord, parse_corpus, parse_queries

logger = logging.getLogger(__name__)

MEDIA_CACHE_SIZE = 256


class CorpusStore:
    """Immutable id -> record map. Media bytes are read on first use, never at build time."""

    def __init__(self, records: Sequence[CorpusRecord], media_root: str | Path | None = None,
                 cache_size: int = MEDIA_CACHE_SIZE):
        self._by_id: dict[str, CorpusRecord] = {}
        for r in records:
            if r.docid in self._by_id:
                raise DuplicateDocId(r.docid)
            self._by_id[r.docid] = r
        self.docids: tuple[str, ...] = tuple(self._by_id)
        self.media_root = Path(media_root) if media_root is not None else Path(".")
        self._read_cached = lru_cache(maxsize=cache_size)(self._read_uncached)

    def __len__(self) -> int:
        return len(self._by_id)

    def __contains__(self, docid: str) -> bool:
        return docid in self._by_id

    def __iter__(self):
        return iter(self._by_id.values())

    def lookup(self, docid: str) -> CorpusRecord:
        try:
            return self._by_id[docid]
        except KeyError:
            raise DanglingDocId(docid) from None

    def _read_uncached(self, path: str) -> bytes:
        try:
            return (self.media_root / path).read_bytes()
        except OSError as e:
            raise MediaReadError(path, e) from None

    def read_media(self, path: str) -> bytes:
        return self._read_cached(path)

    def clear_cache(self) -> None:
        self._read_cached.cache_clear()


def build_store(records: Sequence[CorpusRecord], media_root: str | Path | None = None) -> CorpusStore:
    return CorpusStore(records, media_root)


@dataclass(frozen=True)
class TrainGroup:
    query: QueryRecord
    positive: CorpusRecord
    negatives: tuple[CorpusRecord, ...]
    padded: int = 0  # negatives drawn from the corpus fallback


def resolve_group(store: CorpusStore, query: QueryRecord, m: int, rng: np.random.Generator) -> TrainGroup:
    """Pick one positive and exactly ``m`` negatives for ``query``.

    Listed negatives are sampled without replacement. A shortfall is filled
    uniformly from corpus documents that are neither positive nor already
    listed; if that pool is smaller than the shortfall it is sampled with
    replacement.
    """
    if not query.trainable:
        raise DataError(f"query {query.query_id!r} has no positives")
    for d in query.referenced_ids():
        if d not in store:
            raise DanglingDocId(d, query.query_id)
    pos_ids = query.positive_document_ids
    positive = store.lookup(pos_ids[int(rng.integers(len(pos_ids)))])

    listed = query.negative_document_ids
    if len(listed) >= m:
        picks = rng.choice(len(listed), size=m, replace=False) if m else []
        negatives = [store.lookup(listed[int(i)]) for i in picks]
        return TrainGroup(query, positive, tuple(negatives))

    negatives = [store.lookup(d) for d in listed]
    short = m - len(listed)
    excluded = set(pos_ids) | set(listed)
    pool = [d for d in store.docids if d not in excluded]
    if not pool:
        excluded_pos = set(pos_ids)
        if not any(d not in excluded_pos for d in store.docids):
            raise EmptyCorpusFallback(f"query {query.query_id!r}: corpus has no non-positive documents")
        pool = [d for d in store.docids if d not in excluded_pos]
    picks = rng.choice(len(pool), size=short, replace=short > len(pool))
    negatives.extend(store.lookup(pool[int(i)]) for i in picks)
    logger.debug("query %s: padded %d negatives from corpus", query.query_id, short)
    return TrainGroup(query, positive, tuple(negatives), padded=short)


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    queries: str
    corpus: str
    weight: float = 1.0
    media_root: str | None = None

    def __post_init__(self):
        if not self.weight > 0:
            raise UsageError(f"dataset {self.name!r}: weight must be > 0")


@dataclass
class Dataset:
    """A loaded dataset: trainable queries plus its corpus store."""

    name: str
    queries: list[QueryRecord]
    store: CorpusStore
    weight: float = 1.0


def load_dataset(spec: DatasetSpec) -> Dataset:
    with open(spec.corpus, encoding="utf-8") as fh:
        corpus = parse_corpus(fh)
    with open(spec.queries, encoding="utf-8") as fh:
        queries = parse_queries(fh)
    media_root = spec.media_root if spec.media_root is not None else Path(spec.corpus).parent
    trainable = [q for q in queries if q.trainable]
    return Dataset(spec.name, trainable, build_store(corpus, media_root), spec.weight)


def parse_dataset_arg(arg: str) -> DatasetSpec:
    """``name=x,queries=path,corpus=path[,weight=w][,media_root=dir]``"""
    fields_ = {}
    for part in arg.split(","):
        if "=" not in part:
            raise UsageError(f"bad dataset entry {arg!r}: expected key=value pairs")
        k, v = part.split("=", 1)
        fields_[k.strip()] = v.strip()
    try:
        weight = float(fields_.pop("weight", 1.0))
        return DatasetSpec(weight=weight, **fields_)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad dataset entry {arg!r}: {e}") from None


def read_manifest(path: str | Path) -> list[DatasetSpec]:
    """JSON list of ``{name, queries, corpus, weight}`` objects; relative paths resolve against the manifest."""
    base = Path(path).parent
    try:
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"manifest {path}: {e}") from None
    specs = []
    for e in entries:
        e = dict(e)
        for key in ("queries", "corpus", "media_root"):
            if e.get(key) is not None and not Path(e[key]).is_absolute():
                e[key] = str(base / e[key])
        specs.append(DatasetSpec(**e))
    return specs


@dataclass(frozen=True)
class BatchAssignment:
    dataset: int  # position in the dataset list
    name: str
    query_indices: tuple[int, ...]


def plan_epoch(datasets: Sequence[Dataset], batch_size: int, seed: int) -> list[BatchAssignment]:
    """Order one epoch of homogeneous batches.

    Each dataset's queries are shuffled and chunked into batches (the last
    one may be short). Batches are then drawn one at a time, picking dataset
    k with probability proportional to ``weight_k * remaining_batches_k``, so
    over an epoch datasets interleave in proportion to weight times size.
    """
    if batch_size < 1:
        raise UsageError("batch size must be >= 1")
    rng = np.random.default_rng(seed)
    queues = []
    for ds in datasets:
        if not ds.queries:
            raise EmptyDataset(ds.name)
        perm = rng.permutation(len(ds.queries))
        queues.append([tuple(int(i) for i in perm[s:s + batch_size])
                       for s in range(0, len(perm), batch_size)])
    heads = [0] * len(queues)
    weights = np.array([ds.weight for ds in datasets], dtype=np.float64)
    plan = []
    total = sum(len(q) for q in queues)
    for _ in range(total):
        remaining = np.array([len(q) - h for q, h in zip(queues, heads)], dtype=np.float64)
        p = weights * remaining
        k = int(rng.choice(len(queues), p=p / p.sum()))
        plan.append(BatchAssignment(k, datasets[k].name, queues[k][heads[k]]))
        heads[k] += 1
    return plan


@dataclass(eq=False)
class TrainBatch:
    """Dense features for one step.

    ``docs`` rows are laid out ``[pos_1, neg_1..., pos_2, neg_2...]``;
    ``targets[i] = i * (1 + m)`` is the zero-based row of query i's positive.
    """

    queries: np.ndarray
    docs: np.ndarray
    targets: np.ndarray
    negatives_per_query: int
    doc_ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.queries.shape[0]


def collate(groups: Sequence[TrainGroup], featurizer: Featurizer, threads: int = 1) -> TrainBatch:
    if not groups:
        raise UsageError("cannot collate an empty batch")
    m = len(groups[0].negatives)
    if any(len(g.negatives) != m for g in groups):
        raise DataError("groups in one batch must have the same number of negatives")
    docs = [d for g in groups for d in (g.positive, *g.negatives)]
    return TrainBatch(
        queries=featurizer.matrix([g.query for g in groups], threads),
        docs=featurizer.matrix(docs, threads),
        targets=np.arange(len(groups), dtype=np.int64) * (1 + m),
        negatives_per_query=m,
        doc_ids=[d.docid for d in docs],
    )
