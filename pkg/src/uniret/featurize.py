"""Hashed byte-trigram features.

Every payload, whatever its modality, is reduced to bytes: text is UTF-8,
media payloads are the raw file contents. The bytes are framed by two
sentinels, cut into overlapping trigrams, hashed with 64-bit FNV-1a and
bucketed modulo the feature width. Multi-payload records sum their payload
vectors and re-normalize.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Union

import numpy as np

from .errors import EmptyContent

if TYPE_CHECKING:
    from .datastore import CorpusStore
    from .records import CorpusRecord, QueryRecord

DEFAULT_WIDTH = 4096

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
BOS, EOS = 0x02, 0x03


@dataclass(frozen=True, eq=False)
class FeatureVec:
    """Sparse vector: sorted unique ``indices`` with float64 ``values``."""

    width: int
    indices: np.ndarray
    values: np.ndarray

    def dense(self) -> np.ndarray:
        out = np.zeros(self.width, dtype=np.float64)
        out[self.indices] = self.values
        return out

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.dot(self.values, self.values)))

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureVec):
            return NotImplemented
        return (
            self.width == other.width
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def trigram_hashes(data: bytes) -> np.ndarray:
    """FNV-1a 64-bit hash of every trigram of ``BOS + data + EOS``."""
    framed = np.frombuffer(bytes([BOS]) + data + bytes([EOS]), dtype=np.uint8).astype(np.uint64)
    n = framed.size - 2
    h = np.full(n, FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    for k in range(3):
        h ^= framed[k:k + n]
        h *= prime  # wraps mod 2**64
    return h


def _normalized(width: int, indices: np.ndarray, values: np.ndarray) -> FeatureVec:
    norm = np.sqrt(np.dot(values, values))
    return FeatureVec(width, indices.astype(np.int64), values / norm)


def featurize_bytes(data: bytes, width: int = DEFAULT_WIDTH) -> FeatureVec:
    if not data:
        raise EmptyContent("cannot featurize empty content")
    buckets = (trigram_hashes(data) % np.uint64(width)).astype(np.int64)
    idx, counts = np.unique(buckets, return_counts=True)
    return _normalized(width, idx, counts.astype(np.float64))


def merge(vectors: Iterable[FeatureVec]) -> FeatureVec:
    """Sum then re-normalize. Inputs are summed in a canonical order so the
    result does not depend on the order they are given in."""
    vecs = list(vectors)
    if not vecs:
        raise EmptyContent("nothing to merge")
    if len(vecs) == 1:
        return vecs[0]
    width = vecs[0].width
    if any(v.width != width for v in vecs):
        raise ValueError("feature widths differ")
    vecs.sort(key=lambda v: (v.indices.tobytes(), v.values.tobytes()))
    acc = np.zeros(width, dtype=np.float64)
    for v in vecs:
        acc[v.indices] += v.values
    idx = np.flatnonzero(acc)
    return _normalized(width, idx, acc[idx])


def payload_bytes(modality: str, value: str, store: "CorpusStore | None") -> bytes:
    if modality == "text":
        return value.encode("utf-8")
    if store is None:
        raise ValueError(f"{modality} payload {value!r} needs a store to resolve media")
    return store.read_media(value)


def featurize_record(
    record: "Union[CorpusRecord, QueryRecord]",
    store: "CorpusStore | None" = None,
    width: int = DEFAULT_WIDTH,
) -> FeatureVec:
    """Featurize every payload of ``record`` and merge them."""
    vecs = []
    for modality, value in record.payloads():
        data = payload_bytes(modality, value, store)
        if not data:
            raise EmptyContent(f"{record.record_id}: empty {modality} payload")
        vecs.append(featurize_bytes(data, width))
    return merge(vecs)


class Featurizer:
    """Callable binding a feature width and a media source."""

    def __init__(self, width: int = DEFAULT_WIDTH, store: "CorpusStore | None" = None):
        self.width = width
        self.store = store

    def __call__(self, record) -> FeatureVec:
        return featurize_record(record, self.store, self.width)

    def matrix(self, records, threads: int = 1) -> np.ndarray:
        """Dense ``len(records) x width`` matrix, rows in input order."""
        records = list(records)
        if threads > 1 and len(records) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(threads) as ex:
                vecs = list(ex.map(self, records))
        else:
            vecs = [self(r) for r in records]
        out = np.zeros((len(vecs), self.width), dtype=np.float64)
        for i, v in enumerate(vecs):
            out[i, v.indices] = v.values
        return out


def bucket_collision_rate(data: bytes, width: int = DEFAULT_WIDTH) -> float:
    """Fraction of distinct trigrams in ``data`` that share a bucket with another distinct trigram."""
    if not data:
        raise EmptyContent("cannot featurize empty content")
    h = np.unique(trigram_hashes(data))
    buckets = h % np.uint64(width)
    _, inverse, counts = np.unique(buckets, return_inverse=True, return_counts=True)
    return float(np.mean(counts[inverse] > 1))
