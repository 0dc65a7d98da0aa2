"""Flat embedding index: binary file format, sharded corpus encoding, exact top-k search.

File layout (little-endian)::

    b"URIX" | version u16 | D u32 | N u64
    N x (u32 byte length + UTF-8 docid)
    N x D float32, row-major
"""

from __future__ import annotations

import io
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datastore import CorpusStore
from .errors import (
    BadMagic,
    CountMismatch,
    DegeneratePrefix,
    DuplicateDocId,
    TruncatedFile,
    UniretError,
    UsageError,
    VersionMismatch,
)
from .featurize import Featurizer
from .model import NORM_FLOOR, ModelParams, encode_matrix

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"URIX"
INDEX_VERSION = 1
_HEAD = struct.Struct("<4sHIQ")
_LEN = struct.Struct("<I")


@dataclass(eq=False)
class EmbeddingIndex:
    docids: list[str]
    rows: np.ndarray  # N x D float32

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2 or self.rows.shape[0] != len(self.docids):
            raise CountMismatch(f"{len(self.docids)} docids but rows have shape {self.rows.shape}")
        if len(set(self.docids)) != len(self.docids):
            seen = set()
            dup = next(d for d in self.docids if d in seen or seen.add(d))
            raise DuplicateDocId(dup)
        self._order: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    def docid_order(self) -> np.ndarray:
        """Rank of each row's docid in ascending string order (used for tie-breaks)."""
        if self._order is None:
            order = np.empty(self.count, dtype=np.int64)
            order[sorted(range(self.count), key=self.docids.__getitem__)] = np.arange(self.count)
            self._order = order
        return self._order

    def equals(self, other: "EmbeddingIndex") -> bool:
        return self.docids == other.docids and self.rows.shape == other.rows.shape and \
            self.rows.tobytes() == other.rows.tobytes()


def index_bytes(index: EmbeddingIndex) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEAD.pack(INDEX_MAGIC, INDEX_VERSION, index.dim, index.count))
    for d in index.docids:
        raw = d.encode("utf-8")
        buf.write(_LEN.pack(len(raw)))
        buf.write(raw)
    buf.write(index.rows.astype("<f4", copy=False).tobytes(order="C"))
    return buf.getvalue()


def index_from_bytes(data: bytes) -> EmbeddingIndex:
    if len(data) < 4 or data[:4] != INDEX_MAGIC:
        raise BadMagic("not an embedding index (bad magic)")
    if len(data) < _HEAD.size:
        raise TruncatedFile("index header truncated")
    _, version, D, N = _HEAD.unpack_from(data)
    if version != INDEX_VERSION:
        raise VersionMismatch(f"index version {version}, expected {INDEX_VERSION}")
    off = _HEAD.size
    docids = []
    for _ in range(N):
        if off + _LEN.size > len(data):
            raise TruncatedFile("docid table truncated")
        (n,) = _LEN.unpack_from(data, off)
        off += _LEN.size
        if off + n > len(data):
            raise TruncatedFile("docid table truncated")
        docids.append(data[off:off + n].decode("utf-8"))
        off += n
    need = off + 4 * N * D
    if len(data) < need:
        raise TruncatedFile(f"index rows truncated: {len(data) - off} of {4 * N * D} bytes present")
    if len(data) > need:
        raise CountMismatch(f"{len(data) - need} trailing bytes after {N} rows")
    rows = np.frombuffer(data, dtype="<f4", count=N * D, offset=off).reshape(N, D).astype(np.float32)
    return EmbeddingIndex(docids, rows)


def write_index(path: str | Path, index: EmbeddingIndex) -> None:
    Path(path).write_bytes(index_bytes(index))


def read_index(path: str | Path) -> EmbeddingIndex:
    return index_from_bytes(Path(path).read_bytes())


def shard_positions(n_docs: int, shard: int, num_shards: int) -> range:
    if not 0 <= shard < num_shards:
        raise UsageError(f"shard {shard} outside [0, {num_shards})")
    return range(shard, n_docs, num_shards)


def encode_corpus(params: ModelParams, store: CorpusStore, shard: tuple[int, int] = (0, 1),
                  batch_size: int = 256, threads: int = 1) -> EmbeddingIndex:
    """Encode the documents at positions ``i, i+n, i+2n, ...`` in corpus order."""
    i, n = shard
    if batch_size < 1:
        raise UsageError("batch size must be >= 1")
    docids = [store.docids[p] for p in shard_positions(len(store), i, n)]
    featurizer = Featurizer(params.width, store)
    rows = np.empty((len(docids), params.dim), dtype=np.float32)
    for s in range(0, len(docids), batch_size):
        chunk = docids[s:s + batch_size]
        try:
            X = featurizer.matrix([store.lookup(d) for d in chunk], threads)
            rows[s:s + len(chunk)] = encode_matrix(params, X)
        except UniretError as e:
            e.args = (f"encoding documents {chunk[0]!r}..{chunk[-1]!r}: {e}",)
            raise
    return EmbeddingIndex(docids, rows)


def merge_shards(shards: Sequence[EmbeddingIndex]) -> EmbeddingIndex:
    """Interleave shards produced by :func:`encode_corpus` back into corpus order."""
    n = len(shards)
    total = sum(s.count for s in shards)
    dim = shards[0].dim
    docids: list[str] = [""] * total
    rows = np.empty((total, dim), dtype=np.float32)
    for i, s in enumerate(shards):
        pos = list(shard_positions(total, i, n))
        if len(pos) != s.count:
            raise CountMismatch(f"shard {i} has {s.count} rows, expected {len(pos)}")
        rows[pos] = s.rows
        for p, d in zip(pos, s.docids):
            docids[p] = d
    return EmbeddingIndex(docids, rows)


def concat_indexes(parts: Sequence[EmbeddingIndex]) -> EmbeddingIndex:
    if len(parts) == 1:
        return parts[0]
    return EmbeddingIndex([d for p in parts for d in p.docids], np.concatenate([p.rows for p in parts]))


@dataclass(frozen=True)
class SearchHit:
    docid: str
    score: float
    rank: int


def _unit_prefix_rows(rows: np.ndarray, d: int | None) -> tuple[np.ndarray, np.ndarray]:
    """float64 prefix rows, re-normalized; returns (rows, valid_mask)."""
    R = rows.astype(np.float64)
    if d is None or d == R.shape[1]:
        return R, np.ones(R.shape[0], dtype=bool)
    R = R[:, :d]
    norms = np.sqrt((R * R).sum(axis=1))
    valid = norms >= NORM_FLOOR
    R = np.divide(R, norms[:, None], out=np.zeros_like(R), where=valid[:, None])
    return R, valid


def _unit_prefix_query(q: np.ndarray, d: int | None) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if d is None or d == q.shape[0]:
        return q
    p = q[:d]
    n = np.sqrt((p * p).sum())
    if n < NORM_FLOOR:
        raise DegeneratePrefix(f"query prefix of length {d} has zero norm")
    return p / n


def _check_search_args(index: EmbeddingIndex, k: int, d: int | None) -> None:
    if k < 1:
        raise UsageError("k must be >= 1")
    if d is not None and not 1 <= d <= index.dim:
        raise UsageError(f"prefix dim {d} outside [1, {index.dim}]")


def _scores(R: np.ndarray, valid: np.ndarray, q: np.ndarray) -> np.ndarray:
    # Row-wise reduction: identical rows always get bit-identical scores.
    s = (R * q).sum(axis=1)
    s[~valid] = -np.inf
    return s


def _top(scores: np.ndarray, order: np.ndarray, k: int) -> np.ndarray:
    """Row positions of the top ``k`` by (score desc, docid asc)."""
    k = min(k, scores.size)
    if k < scores.size:
        # partition on score only, keep everything tied with the k-th value
        kth = -np.partition(-scores, k - 1)[k - 1]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(scores.size)
    sel = cand[np.lexsort((order[cand], -scores[cand]))]
    return sel[:k]


def search(index: EmbeddingIndex, query: np.ndarray, k: int, d: int | None = None) -> list[SearchHit]:
    """Exact inner-product top-k, optionally at a Matryoshka prefix ``d``.

    Ties are broken by ascending docid. Rows whose prefix has zero norm are
    logged and scored ``-inf``.
    """
    _check_search_args(index, k, d)
    R, valid = _unit_prefix_rows(index.rows, d)
    if not valid.all():
        logger.warning("%d rows have a zero-norm prefix at d=%s (first %r)",
                       int((~valid).sum()), d, index.docids[int(np.flatnonzero(~valid)[0])])
    q = _unit_prefix_query(query, d)
    s = _scores(R, valid, q)
    top = _top(s, index.docid_order(), k)
    return [SearchHit(index.docids[p], float(s[p]), r) for r, p in enumerate(top, start=1)]


def batch_search(index: EmbeddingIndex, queries: np.ndarray, k: int, d: int | None = None,
                 partitions: int = 1, threads: int = 1) -> list[list[SearchHit]]:
    """:func:`search` for every row of ``queries``.

    The corpus may be split into ``partitions`` contiguous chunks; each chunk
    yields its own top-k and the candidates are merged under the same
    ordering, so the output does not depend on the split.
    """
    _check_search_args(index, k, d)
    queries = np.asarray(queries, dtype=np.float64)
    if queries.size == 0:
        return []
    R, valid = _unit_prefix_rows(index.rows, d)
    order = index.docid_order()
    bounds = np.linspace(0, index.count, max(1, partitions) + 1).astype(int)

    def one(q: np.ndarray) -> list[SearchHit]:
        qv = _unit_prefix_query(q, d)
        cand_pos, cand_scores = [], []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            if hi <= lo:
                continue
            s = _scores(R[lo:hi], valid[lo:hi], qv)
            top = _top(s, order[lo:hi], k)
            cand_pos.append(top + lo)
            cand_scores.append(s[top])
        pos = np.concatenate(cand_pos)
        sc = np.concatenate(cand_scores)
        sel = np.lexsort((order[pos], -sc))[:k]
        return [SearchHit(index.docids[pos[j]], float(sc[j]), r) for r, j in enumerate(sel, start=1)]

    if threads > 1 and len(queries) > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(one, queries))
    return [one(q) for q in queries]
