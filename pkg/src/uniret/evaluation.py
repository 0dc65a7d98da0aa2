"""nDCG@k / Recall@k and TREC run / qrels files.

Run file: ``qid Q0 docid rank score tag``. Qrels file: ``qid 0 docid grade``.
Rankings are evaluated in stored rank order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import DataError, DuplicateJudgment, MalformedLine, UsageError

Qrels = dict[str, dict[str, int]]


@dataclass
class Run:
    """Per query, ``(docid, score)`` pairs in rank order."""

    rankings: dict[str, list[tuple[str, float]]] = field(default_factory=dict)
    tag: str = "uniret"

    def __post_init__(self):
        for qid, ranked in self.rankings.items():
            ids = [d for d, _ in ranked]
            if len(set(ids)) != len(ids):
                raise DataError(f"run has repeated docids for query {qid!r}")

    @classmethod
    def from_hits(cls, qids: Sequence[str], hits: Sequence[Sequence], tag: str = "uniret") -> "Run":
        return cls({q: [(h.docid, h.score) for h in hs] for q, hs in zip(qids, hits)}, tag)


@dataclass
class MetricResult:
    name: str
    per_query: dict[str, float]
    mean: float
    excluded: list[str]  # queries without any relevant judgment

    def as_dict(self) -> dict:
        return {"metric": self.name, "mean": self.mean, "n_queries": len(self.per_query),
                "n_excluded": len(self.excluded), "per_query": self.per_query}


def _judged(qrels: Mapping[str, Mapping[str, int]]) -> tuple[list[str], list[str]]:
    keep, excluded = [], []
    for qid in sorted(qrels):
        (keep if any(g > 0 for g in qrels[qid].values()) else excluded).append(qid)
    return keep, excluded


def _mean(values: Mapping[str, float]) -> float:
    return math.fsum(values[q] for q in sorted(values)) / len(values) if values else 0.0


def ndcg_at_k(run: Run, qrels: Mapping[str, Mapping[str, int]], k: int, gain: str = "linear") -> MetricResult:
    """Linear gain by default (``gain="exp"`` uses 2**rel - 1), log2(rank + 1) discount.

    Queries judged in qrels but absent from the run score 0. Queries with no
    positive grade are excluded from the mean.
    """
    if k < 1:
        raise UsageError("k must be >= 1")
    if gain == "linear":
        g = float
    elif gain == "exp":
        def g(rel):
            return 2.0 ** rel - 1.0
    else:
        raise UsageError(f"unknown gain {gain!r}")
    keep, excluded = _judged(qrels)
    per_query = {}
    for qid in keep:
        judged = qrels[qid]
        ranked = run.rankings.get(qid, [])[:k]
        dcg = sum(g(judged.get(d, 0)) / math.log2(r + 1) for r, (d, _) in enumerate(ranked, start=1)
                  if judged.get(d, 0) > 0)
        ideal = sorted((v for v in judged.values() if v > 0), reverse=True)[:k]
        idcg = sum(g(v) / math.log2(r + 1) for r, v in enumerate(ideal, start=1))
        per_query[qid] = dcg / idcg
    return MetricResult(f"ndcg@{k}", per_query, _mean(per_query), excluded)


def recall_at_k(run: Run, qrels: Mapping[str, Mapping[str, int]], k: int) -> MetricResult:
    if k < 1:
        raise UsageError("k must be >= 1")
    keep, excluded = _judged(qrels)
    per_query = {}
    for qid in keep:
        relevant = {d for d, v in qrels[qid].items() if v > 0}
        top = {d for d, _ in run.rankings.get(qid, [])[:k]}
        per_query[qid] = len(relevant & top) / len(relevant)
    return MetricResult(f"recall@{k}", per_query, _mean(per_query), excluded)


def evaluate(run: Run, qrels: Qrels, metrics: Iterable[str], gain: str = "linear") -> list[MetricResult]:
    """Metrics named like ``ndcg@10`` or ``recall@1``."""
    out = []
    for spec in metrics:
        name, _, k = spec.strip().lower().partition("@")
        try:
            k = int(k)
        except ValueError:
            raise UsageError(f"bad metric {spec!r}; expected e.g. ndcg@10") from None
        if name == "ndcg":
            out.append(ndcg_at_k(run, qrels, k, gain))
        elif name == "recall":
            out.append(recall_at_k(run, qrels, k))
        else:
            raise UsageError(f"unknown metric {name!r}")
    return out


# -- files -------------------------------------------------------------------


def parse_qrels(lines: Iterable[str]) -> Qrels:
    qrels: Qrels = {}
    for line_no, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise MalformedLine(line_no, "expected 'qid 0 docid grade'")
        qid, _, docid, grade = parts
        try:
            g = int(grade)
        except ValueError:
            raise MalformedLine(line_no, f"grade {grade!r} is not an integer") from None
        if g < 0:
            raise MalformedLine(line_no, "grade must be >= 0")
        judged = qrels.setdefault(qid, {})
        if docid in judged:
            raise DuplicateJudgment(qid, docid, line_no)
        judged[docid] = g
    return qrels


def read_qrels(path: str | Path) -> Qrels:
    with open(path, encoding="utf-8") as fh:
        return parse_qrels(fh)


def format_qrels(qrels: Qrels) -> str:
    return "".join(f"{q} 0 {d} {g}\n" for q in sorted(qrels) for d, g in sorted(qrels[q].items()))


def write_qrels(path: str | Path, qrels: Qrels) -> None:
    Path(path).write_text(format_qrels(qrels), encoding="utf-8")


def parse_run(lines: Iterable[str]) -> Run:
    rows: dict[str, list[tuple[int, str, float]]] = {}
    tag = None
    for line_no, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise MalformedLine(line_no, "expected 'qid Q0 docid rank score tag'")
        qid, _, docid, rank, score, t = parts
        try:
            entry = (int(rank), docid, float(score))
        except ValueError:
            raise MalformedLine(line_no, "rank must be an integer and score a number") from None
        tag = tag if tag is not None else t
        rows.setdefault(qid, []).append(entry)
    rankings = {q: [(d, s) for _, d, s in sorted(r, key=lambda e: e[0])] for q, r in rows.items()}
    return Run(rankings, tag or "uniret")


def read_run(path: str | Path) -> Run:
    with open(path, encoding="utf-8") as fh:
        return parse_run(fh)


def format_run(run: Run) -> str:
    return "".join(
        f"{q} Q0 {d} {r} {s!r} {run.tag}\n"
        for q in sorted(run.rankings)
        for r, (d, s) in enumerate(run.rankings[q], start=1)
    )


def write_run(path: str | Path, run: Run) -> None:
    Path(path).write_text(format_run(run), encoding="utf-8")
