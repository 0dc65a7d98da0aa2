"""Training-data records: the materialized v1 format and the decoupled v2 format.

v2 splits training data into a query file and a corpus file. Queries hold
only document ids; document content lives once in the corpus. Both files are
JSON lines with the field names below.
"""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import PurePosixPath
from typing import Iterable, Iterator

from .errors import (
    DocIdContentConflict,
    InvalidMediaPath,
    MalformedLine,
    MissingDocId,
    NoPayload,
    OverlappingPosNeg,
)

logger = logging.getLogger(__name__)

MODALITIES = ("text", "image", "video", "audio")
MEDIA_MODALITIES = ("image", "video", "audio")

CORPUS_FIELDS = ("docid", "title", "document_text", "document_image", "document_video", "document_audio")
QUERY_FIELDS = (
    "query_id",
    "query_text",
    "query_image",
    "query_video",
    "query_audio",
    "positive_document_ids",
    "negative_document_ids",
)


def _check_media_path(path: str) -> None:
    p = PurePosixPath(path.replace("\\", "/"))
    if not path or p.is_absolute() or ".." in p.parts or (len(path) > 1 and path[1] == ":"):
        raise InvalidMediaPath(f"media path must be relative without '..': {path!r}")


def _check_id(value: object, what: str) -> str:
    if not isinstance(value, str) or not value or any(c.isspace() for c in value):
        raise MissingDocId(f"{what} must be a non-empty string without whitespace, got {value!r}")
    return value


@dataclass(frozen=True)
class CorpusRecord:
    """One corpus document. ``title`` is carried over from v1 passages and is
    part of the text payload."""

    docid: str
    document_text: str | None = None
    document_image: str | None = None
    document_video: str | None = None
    document_audio: str | None = None
    title: str | None = None

    def __post_init__(self):
        _check_id(self.docid, "docid")
        if not any(v is not None for v in (self.document_text, self.document_image,
                                             self.document_video, self.document_audio)):
            raise NoPayload(f"document {self.docid!r} has no payload")
        for m in MEDIA_MODALITIES:
            path = getattr(self, f"document_{m}")
            if path is not None:
                _check_media_path(path)

    @property
    def record_id(self) -> str:
        return self.docid

    def payloads(self) -> list[tuple[str, str]]:
        """(modality, value) pairs in fixed modality order."""
        out = []
        if self.document_text is not None:
            text = self.document_text if not self.title else f"{self.title}\n{self.document_text}"
            out.append(("text", text))
        for m in MEDIA_MODALITIES:
            v = getattr(self, f"document_{m}")
            if v is not None:
                out.append((m, v))
        return out

    def to_dict(self) -> dict:
        d = {"docid": self.docid}
        for name in CORPUS_FIELDS[1:]:
            v = getattr(self, name)
            if v is not None:
                d[name] = v
        return d


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    query_text: str | None = None
    query_image: str | None = None
    query_video: str | None = None
    query_audio: str | None = None
    positive_document_ids: tuple[str, ...] = ()
    negative_document_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not isinstance(self.query_id, str) or not self.query_id:
            raise MissingDocId(f"query_id must be a non-empty string, got {self.query_id!r}")
        object.__setattr__(self, "positive_document_ids", tuple(self.positive_document_ids))
        object.__setattr__(self, "negative_document_ids", tuple(self.negative_document_ids))
        for d in self.positive_document_ids + self.negative_document_ids:
            _check_id(d, f"document id in query {self.query_id!r}")
        if not any(v is not None for v in (self.query_text, self.query_image,
                                             self.query_video, self.query_audio)):
            raise NoPayload(f"query {self.query_id!r} has no payload")
        for m in MEDIA_MODALITIES:
            path = getattr(self, f"query_{m}")
            if path is not None:
                _check_media_path(path)
        overlap = set(self.positive_document_ids) & set(self.negative_document_ids)
        if overlap:
            raise OverlappingPosNeg(
                f"query {self.query_id!r}: ids both positive and negative: {sorted(overlap)}"
            )

    @property
    def record_id(self) -> str:
        return self.query_id

    @property
    def trainable(self) -> bool:
        return len(self.positive_document_ids) > 0

    def referenced_ids(self) -> tuple[str, ...]:
        return self.positive_document_ids + self.negative_document_ids

    def payloads(self) -> list[tuple[str, str]]:
        out = []
        for m in MODALITIES:
            v = getattr(self, f"query_{m}")
            if v is not None:
                out.append((m, v))
        return out

    def to_dict(self) -> dict:
        d: dict = {"query_id": self.query_id}
        for m in MODALITIES:
            v = getattr(self, f"query_{m}")
            if v is not None:
                d[f"query_{m}"] = v
        d["positive_document_ids"] = list(self.positive_document_ids)
        d["negative_document_ids"] = list(self.negative_document_ids)
        return d


@dataclass(frozen=True)
class Passage:
    docid: str
    title: str
    text: str

    def to_dict(self) -> dict:
        return {"docid": self.docid, "title": self.title, "text": self.text}


@dataclass(frozen=True)
class V1Record:
    query_id: str
    query: str
    positive_passages: tuple[Passage, ...]
    negative_passages: tuple[Passage, ...]

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "query": self.query,
            "positive_passages": [p.to_dict() for p in self.positive_passages],
            "negative_passages": [p.to_dict() for p in self.negative_passages],
        }


def dumps(record) -> str:
    """Canonical single-line JSON for any record type."""
    return json.dumps(record.to_dict(), ensure_ascii=False, separators=(",", ":"))


def write_jsonl(records: Iterable, fh) -> int:
    """Write records to a text handle; returns the number of bytes written (UTF-8)."""
    n = 0
    for r in records:
        line = dumps(r) + "\n"
        fh.write(line)
        n += len(line.encode("utf-8"))
    return n


def _iter_objects(stream: Iterable[str | bytes]) -> Iterator[tuple[int, dict]]:
    for line_no, line in enumerate(stream, start=1):
        if isinstance(line, bytes):
            line = line.decode("utf-8")
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise MalformedLine(line_no, e.msg) from None
        if not isinstance(obj, dict):
            raise MalformedLine(line_no, "expected a JSON object")
        yield line_no, obj


def _opt_str(obj: dict, key: str, line_no: int) -> str | None:
    v = obj.get(key)
    if v is not None and not isinstance(v, str):
        raise MalformedLine(line_no, f"{key} must be a string")
    return v


def _note_unknown(obj: dict, known: tuple[str, ...], unknown: Counter | None) -> None:
    extra = [k for k in obj if k not in known]
    if extra:
        if unknown is not None:
            unknown.update(extra)
        logger.debug("ignoring unknown fields %s", extra)


def parse_corpus(stream: Iterable[str | bytes], unknown: Counter | None = None) -> list[CorpusRecord]:
    """Parse corpus JSON lines.

    Unknown fields are skipped and tallied into ``unknown`` when given.
    """
    out = []
    for line_no, obj in _iter_objects(stream):
        if "docid" not in obj:
            raise MissingDocId(f"line {line_no}: record has no docid")
        _note_unknown(obj, CORPUS_FIELDS, unknown)
        kwargs = {k: _opt_str(obj, k, line_no) for k in CORPUS_FIELDS[1:]}
        try:
            out.append(CorpusRecord(docid=obj["docid"], **kwargs))
        except (NoPayload, MissingDocId, InvalidMediaPath) as e:
            raise type(e)(f"line {line_no}: {e}") from None
    return out


def _id_list(obj: dict, key: str, line_no: int) -> tuple[str, ...]:
    v = obj.get(key, [])
    if v is None:
        return ()
    if not isinstance(v, list):
        raise MalformedLine(line_no, f"{key} must be a list")
    return tuple(v)


def parse_queries(stream: Iterable[str | bytes], unknown: Counter | None = None) -> list[QueryRecord]:
    """Parse query JSON lines.

    Queries without positives are accepted (they can still be encoded) but are
    not trainable; see :attr:`QueryRecord.trainable`.
    """
    out = []
    for line_no, obj in _iter_objects(stream):
        _note_unknown(obj, QUERY_FIELDS, unknown)
        if "query_id" not in obj:
            raise MissingDocId(f"line {line_no}: record has no query_id")
        try:
            rec = QueryRecord(
                query_id=obj["query_id"],
                query_text=_opt_str(obj, "query_text", line_no),
                query_image=_opt_str(obj, "query_image", line_no),
                query_video=_opt_str(obj, "query_video", line_no),
                query_audio=_opt_str(obj, "query_audio", line_no),
                positive_document_ids=_id_list(obj, "positive_document_ids", line_no),
                negative_document_ids=_id_list(obj, "negative_document_ids", line_no),
            )
        except (NoPayload, MissingDocId, InvalidMediaPath, OverlappingPosNeg) as e:
            raise type(e)(f"line {line_no}: {e}") from None
        out.append(rec)
    untrainable = sum(not q.trainable for q in out)
    if untrainable:
        logger.info("%d of %d queries have no positives (encode-only)", untrainable, len(out))
    return out


def _passage(obj: object, line_no: int) -> Passage:
    if not isinstance(obj, dict) or not isinstance(obj.get("docid"), str) or not obj["docid"]:
        raise MalformedLine(line_no, "passage must be an object with a docid")
    title = obj.get("title") or ""
    text = obj.get("text") or ""
    if not isinstance(title, str) or not isinstance(text, str):
        raise MalformedLine(line_no, "passage title/text must be strings")
    return Passage(obj["docid"], title, text)


def parse_v1(stream: Iterable[str | bytes]) -> list[V1Record]:
    out = []
    for line_no, obj in _iter_objects(stream):
        qid = obj.get("query_id")
        if not isinstance(qid, str) or not qid:
            raise MalformedLine(line_no, "missing query_id")
        pos = tuple(_passage(p, line_no) for p in obj.get("positive_passages") or [])
        neg = tuple(_passage(p, line_no) for p in obj.get("negative_passages") or [])
        ids = [p.docid for p in pos + neg]
        if len(set(ids)) != len(ids):
            raise MalformedLine(line_no, "docids repeat within one record")
        out.append(V1Record(qid, obj.get("query") or "", pos, neg))
    return out


@dataclass
class ValidationReport:
    dangling_query_refs: int = 0
    dangling_samples: list[tuple[str, str]] = field(default_factory=list)
    duplicate_docids: int = 0
    duplicate_samples: list[str] = field(default_factory=list)
    queries_without_payload: int = 0

    @property
    def ok(self) -> bool:
        return self.dangling_query_refs == 0 and self.duplicate_docids == 0 and self.queries_without_payload == 0

    def summary(self) -> str:
        lines = [
            f"ok: {str(self.ok).lower()}",
            f"dangling_query_refs: {self.dangling_query_refs}",
            f"duplicate_docids: {self.duplicate_docids}",
            f"queries_without_payload: {self.queries_without_payload}",
        ]
        if self.dangling_samples:
            lines.append("dangling samples: " + ", ".join(f"{q}->{d}" for q, d in self.dangling_samples))
        if self.duplicate_samples:
            lines.append("duplicate samples: " + ", ".join(self.duplicate_samples))
        return "\n".join(lines)


def validate(queries: Iterable[QueryRecord], corpus: Iterable[CorpusRecord], max_samples: int = 10) -> ValidationReport:
    report = ValidationReport()
    ids: set[str] = set()
    counted_dup: set[str] = set()
    for rec in corpus:
        if rec.docid in ids:
            if rec.docid not in counted_dup:
                counted_dup.add(rec.docid)
                report.duplicate_docids += 1
                if len(report.duplicate_samples) < max_samples:
                    report.duplicate_samples.append(rec.docid)
        ids.add(rec.docid)
    for q in queries:
        # QueryRecord construction already rejects payload-less queries; the
        # counter exists for records built around that check.
        if not q.payloads():
            report.queries_without_payload += 1
        for d in q.referenced_ids():
            if d not in ids:
                report.dangling_query_refs += 1
                if len(report.dangling_samples) < max_samples:
                    report.dangling_samples.append((q.query_id, d))
    return report


@dataclass(frozen=True)
class ConversionStats:
    n_queries: int
    passage_occurrences: int
    distinct_passages: int
    v1_bytes: int
    v1_passage_bytes: int
    v2_corpus_bytes: int
    v2_query_bytes: int

    @property
    def duplication_factor(self) -> float:
        return self.passage_occurrences / self.distinct_passages if self.distinct_passages else 1.0

    @property
    def passage_byte_ratio(self) -> float:
        return self.v1_passage_bytes / self.v2_corpus_bytes if self.v2_corpus_bytes else 0.0

    def as_dict(self) -> dict:
        return {
            "n_queries": self.n_queries,
            "passage_occurrences": self.passage_occurrences,
            "distinct_passages": self.distinct_passages,
            "duplication_factor": self.duplication_factor,
            "v1_bytes": self.v1_bytes,
            "v1_passage_bytes": self.v1_passage_bytes,
            "v2_corpus_bytes": self.v2_corpus_bytes,
            "v2_query_bytes": self.v2_query_bytes,
            "v2_total_bytes": self.v2_corpus_bytes + self.v2_query_bytes,
            "passage_byte_ratio": self.passage_byte_ratio,
        }


def _utf8_len(s: str) -> int:
    return len(s.encode("utf-8"))


def _passage_to_corpus(p: Passage) -> CorpusRecord:
    return CorpusRecord(docid=p.docid, document_text=p.text, title=p.title or None)


def convert_v1_to_v2(v1_records: Iterable[V1Record]) -> tuple[list[QueryRecord], list[CorpusRecord], ConversionStats]:
    """Split materialized v1 records into id-only queries plus a deduplicated corpus.

    Byte counts use the canonical JSON line of each object including its
    newline. ``v1_passage_bytes`` counts every passage occurrence,
    ``v2_corpus_bytes`` every distinct corpus line.
    """
    queries: list[QueryRecord] = []
    corpus: dict[str, CorpusRecord] = {}
    digests: dict[str, bytes] = {}
    occurrences = v1_bytes = v1_passage_bytes = 0
    for rec in v1_records:
        v1_bytes += _utf8_len(dumps(rec)) + 1
        for p in rec.positive_passages + rec.negative_passages:
            occurrences += 1
            v1_passage_bytes += _utf8_len(json.dumps(p.to_dict(), ensure_ascii=False, separators=(",", ":"))) + 1
            digest = hashlib.sha256(json.dumps([p.title, p.text]).encode("utf-8")).digest()
            seen = digests.get(p.docid)
            if seen is None:
                digests[p.docid] = digest
                corpus[p.docid] = _passage_to_corpus(p)
            elif seen != digest:
                raise DocIdContentConflict(p.docid)
        queries.append(QueryRecord(
            query_id=rec.query_id,
            query_text=rec.query,
            positive_document_ids=tuple(p.docid for p in rec.positive_passages),
            negative_document_ids=tuple(p.docid for p in rec.negative_passages),
        ))
    corpus_list = list(corpus.values())
    stats = ConversionStats(
        n_queries=len(queries),
        passage_occurrences=occurrences,
        distinct_passages=len(corpus_list),
        v1_bytes=v1_bytes,
        v1_passage_bytes=v1_passage_bytes,
        v2_corpus_bytes=sum(_utf8_len(dumps(c)) + 1 for c in corpus_list),
        v2_query_bytes=sum(_utf8_len(dumps(q)) + 1 for q in queries),
    )
    return queries, corpus_list, stats


def materialize_v1(queries: Iterable[QueryRecord], corpus: Iterable[CorpusRecord]) -> list[V1Record]:
    """Inverse of :func:`convert_v1_to_v2` for text corpora: join ids back to content."""
    by_id = {c.docid: c for c in corpus}

    def passage(docid: str) -> Passage:
        c = by_id[docid]
        return Passage(docid, c.title or "", c.document_text or "")

    return [
        V1Record(
            q.query_id,
            q.query_text or "",
            tuple(passage(d) for d in q.positive_document_ids),
            tuple(passage(d) for d in q.negative_document_ids),
        )
        for q in queries
    ]
