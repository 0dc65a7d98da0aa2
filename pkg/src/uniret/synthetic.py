"""Synthetic corpora for the storage and learnability experiments."""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from .datastore import Dataset, build_store
from .records import CorpusRecord, Passage, QueryRecord, V1Record

ALPHABET = (string.ascii_letters + string.digits).encode("ascii")


def storage_scenario(n_docs: int = 100, n_negatives: int = 20, doc_len: int = 200, seed: int = 0) -> list[V1Record]:
    """One query per document; query i has doc i as positive and the next
    ``n_negatives`` docs (cyclically) as negatives, so every document is
    referenced exactly ``1 + n_negatives`` times."""
    if n_negatives >= n_docs:
        raise ValueError("need more documents than negatives per query")
    rng = np.random.default_rng(seed)
    words = ["".join(rng.choice(list("abcdefghijklmnopqrstuvwxyz"), size=rng.integers(3, 9)))
             for _ in range(400)]

    def text(n_chars: int) -> str:
        out = []
        while sum(len(w) + 1 for w in out) < n_chars:
            out.append(words[int(rng.integers(len(words)))])
        return " ".join(out)

    passages = [Passage(f"d{i}", f"title {i}", text(doc_len)) for i in range(n_docs)]
    return [
        V1Record(
            query_id=f"q{i}",
            query=text(40),
            positive_passages=(passages[i],),
            negative_passages=tuple(passages[(i + j) % n_docs] for j in range(1, n_negatives + 1)),
        )
        for i in range(n_docs)
    ]


@dataclass
class LearnabilityTask:
    corpus: list[CorpusRecord]
    queries: list[QueryRecord]
    qrels: dict[str, dict[str, int]]

    def dataset(self, name: str = "synthetic", weight: float = 1.0) -> Dataset:
        return Dataset(name, list(self.queries), build_store(self.corpus), weight)


def corrupt(doc: bytes, n_subs: int, rng: np.random.Generator) -> bytes:
    """Replace ``n_subs`` distinct positions with a different alphabet byte."""
    out = bytearray(doc)
    for p in rng.choice(len(out), size=n_subs, replace=False):
        choices = [c for c in ALPHABET if c != out[p]]
        out[p] = choices[int(rng.integers(len(choices)))]
    return bytes(out)


def learnability_task(n_docs: int = 500, doc_len: int = 64, n_subs: int = 8, seed: int = 0) -> LearnabilityTask:
    """Random alphanumeric documents; query i is document i with ``n_subs`` byte substitutions."""
    rng = np.random.default_rng(seed)
    alpha = np.frombuffer(ALPHABET, dtype=np.uint8)
    docs = [bytes(rng.choice(alpha, size=doc_len)) for _ in range(n_docs)]
    corpus = [CorpusRecord(docid=f"d{i}", document_text=d.decode("ascii")) for i, d in enumerate(docs)]
    queries = [
        QueryRecord(query_id=f"q{i}", query_text=corrupt(d, n_subs, rng).decode("ascii"),
                    positive_document_ids=(f"d{i}",))
        for i, d in enumerate(docs)
    ]
    qrels = {f"q{i}": {f"d{i}": 1} for i in range(n_docs)}
    return LearnabilityTask(corpus, queries, qrels)
