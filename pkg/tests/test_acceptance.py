"""Acceptance criteria, one test per criterion, each reporting a pass/fail line."""

import io
import json
import string
import time

import numpy as np
import pytest

from oracles import brute_force_search, central_difference, ndcg_reference, recall_reference, relative_error
from uniret.cli import main
from uniret.datastore import TrainBatch, build_store, plan_epoch
from uniret.evaluation import Run, format_run, ndcg_at_k, parse_run, recall_at_k
from uniret.experiments import run_learnability
from uniret.featurize import Featurizer
from uniret.index import EmbeddingIndex, batch_search, encode_corpus, index_bytes, index_from_bytes, search
from uniret.mine import MineConfig, mine, mine_embeddings
from uniret.model import (
    ModelParams,
    TrainConfig,
    batch_loss,
    checkpoint_bytes,
    encode_matrix,
    loss_and_grad,
    params_from_bytes,
    train,
)
from uniret.records import CorpusRecord, QueryRecord, dumps, parse_corpus, parse_queries, write_jsonl
from uniret.synthetic import learnability_task, storage_scenario

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)


def test_storage_decoupling(tmp_path, verdict):
    t0 = time.perf_counter()
    with open(tmp_path / "v1.jsonl", "w", encoding="utf-8") as fh:
        write_jsonl(storage_scenario(), fh)
    assert main(["convert", "--input", str(tmp_path / "v1.jsonl"), "--out-dir", str(tmp_path / "v2")]) == 0
    stats = json.loads((tmp_path / "v2" / "stats.json").read_text())
    elapsed = time.perf_counter() - t0
    factor, ratio = stats["duplication_factor"], stats["passage_byte_ratio"]
    verdict("1 storage decoupling", factor == 21.0 and ratio >= 15 and elapsed < 5,
            f"factor={factor} ratio={ratio:.3f} time={elapsed:.2f}s")


def _gradient_instance(rng):
    D = int(rng.integers(2, 9))
    F = int(rng.integers(4, 33))
    B = int(rng.integers(1, 5))
    m = int(rng.integers(0, 3))
    n_dims = int(rng.integers(1, min(3, D) + 1))
    dims = sorted(rng.choice(np.arange(1, D), size=n_dims - 1, replace=False).tolist()) + [D]
    tau = float(rng.choice([0.02, 0.1, 1.0]))
    params = ModelParams(rng.normal(size=(D, F)), tau, tuple(dims))
    batch = TrainBatch(rng.normal(size=(B, F)), rng.normal(size=(B * (1 + m), F)), np.arange(B) * (1 + m), m)
    return params, batch


def test_gradient_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240)
    worst = 0.0
    n_instances = 25
    for _ in range(n_instances):
        params, batch = _gradient_instance(rng)
        _, grad = loss_and_grad(params, batch)
        D, F = params.W.shape
        coords = [(int(rng.integers(D)), int(rng.integers(F))) for _ in range(200)]

        def f(W):
            return batch_loss(ModelParams(W, params.tau, params.mrl_dims), batch)

        numeric = central_difference(f, params.W, coords, step=1e-6)
        analytic = np.array([grad[i, j] for i, j in coords])
        worst = max(worst, float(relative_error(analytic, numeric).max()))
    elapsed = time.perf_counter() - t0
    verdict("2 gradient oracle", worst < 1e-5 and elapsed < 30,
            f"{n_instances} instances x 200 coords, max rel err={worst:.2e} time={elapsed:.2f}s")


@pytest.fixture(scope="module")
def learnability():
    t0 = time.perf_counter()
    tasks = {s: learnability_task(seed=s) for s in SEEDS}
    mrl = {s: run_learnability(s, mrl_dims=(16, 32, 64), task=tasks[s]) for s in SEEDS}
    flat = {s: run_learnability(s, mrl_dims=(64,), task=tasks[s]) for s in SEEDS}
    return mrl, flat, time.perf_counter() - t0


def test_learnability(learnability, verdict):
    mrl, _, elapsed = learnability
    rows, ok = [], elapsed < 120
    for s in SEEDS:
        base, after = mrl[s].baseline.recall_at_1[64], mrl[s].trained.recall_at_1[64]
        good = after >= 0.9 and after >= 10 * base
        ok &= good
        rows.append(f"seed{s}: R@1 {base:.3f}->{after:.3f}")
    verdict("3 learnability", ok, "; ".join(rows) + f"; need >=0.9 and >=10x baseline; time={elapsed:.1f}s")


def test_mrl_truncation(learnability, verdict):
    mrl, flat, _ = learnability
    beats_flat = sum(mrl[s].trained.ndcg_at_10[16] >= flat[s].trained.ndcg_at_10[16] for s in SEEDS)
    full_ge_16 = sum(mrl[s].trained.ndcg_at_10[64] >= mrl[s].trained.ndcg_at_10[16] for s in SEEDS)
    detail = "; ".join(
        f"seed{s}: mrl@16={mrl[s].trained.ndcg_at_10[16]:.4f} flat@16={flat[s].trained.ndcg_at_10[16]:.4f} "
        f"mrl@64={mrl[s].trained.ndcg_at_10[64]:.4f}"
        for s in SEEDS
    )
    verdict("4 MRL truncation", beats_flat >= 2 and full_ge_16 >= 2, detail)


def test_search_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(555)
    mismatches = checks = 0
    for _ in range(50):
        n = int(rng.integers(1, 501))
        dim = int(rng.integers(1, 65))
        rows = rng.normal(size=(n, dim))
        if n > 3 and rng.random() < 0.5:
            rows[rng.choice(n, size=n // 3)] = rows[0]  # exact score ties
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        idx = EmbeddingIndex([f"d{i:04d}" for i in rng.permutation(n)], rows.astype(np.float32))
        q = rng.normal(size=dim)
        q /= np.linalg.norm(q)
        for k in (1, 10, n):
            for d in (None, 16, 32):
                if d is not None and d >= dim:
                    continue
                hits = search(idx, q, k, d)
                oracle = brute_force_search(idx.rows, idx.docids, q, k, d)
                checks += 1
                same = ([h.docid for h in hits] == [x for x, _ in oracle]
                        and [h.rank for h in hits] == list(range(1, len(oracle) + 1))
                        and np.allclose([h.score for h in hits], [s for _, s in oracle], rtol=0, atol=1e-12))
                mismatches += not same
    elapsed = time.perf_counter() - t0
    verdict("5 search oracle", mismatches == 0 and elapsed < 30,
            f"{checks} searches over 50 indexes, mismatches={mismatches} time={elapsed:.2f}s")


def test_metric_oracle(verdict):
    rng = np.random.default_rng(66)
    worst = 0.0
    for _ in range(50):
        run, qrels = {}, {}
        for i in range(int(rng.integers(1, 20))):
            docs = [f"d{j}" for j in rng.permutation(60)[: int(rng.integers(1, 40))]]
            run[f"q{i}"] = list(zip(docs, np.sort(rng.normal(size=len(docs)))[::-1].tolist()))
            judged = rng.choice(60, size=int(rng.integers(1, 12)), replace=False)
            qrels[f"q{i}"] = {f"d{j}": int(rng.integers(0, 4)) for j in judged}
        run = Run(run)
        for k in (1, 5, 10, 20):
            nd = ndcg_at_k(run, qrels, k).per_query
            rc = recall_at_k(run, qrels, k).per_query
            for qid, ndcg in nd.items():
                ranking = [d for d, _ in run.rankings[qid]]
                worst = max(worst, abs(ndcg - ndcg_reference(ranking, qrels[qid], k)),
                            abs(rc[qid] - recall_reference(ranking, qrels[qid], k)))
    example = ndcg_at_k(Run({"q1": [("d1", 3.0), ("d2", 2.0), ("d3", 1.0)]}), {"q1": {"d2": 1}}, 3).mean
    verdict("6 metric oracle", worst <= 1e-6 and round(example, 5) == 0.63093,
            f"50 pairs, max abs diff={worst:.1e}; worked example={example:.5f}")


def _ranked_index(n_docs, dim=8):
    angles = np.linspace(0.0, np.pi * 0.95, n_docs)
    rows = np.zeros((n_docs, dim))
    rows[:, 0], rows[:, 1] = np.cos(angles), np.sin(angles)
    return EmbeddingIndex([f"d{i}" for i in range(n_docs)], rows.astype(np.float32))


def test_mining_contract(verdict):
    index = _ranked_index(300)
    queries = [QueryRecord("A", query_text="a", positive_document_ids=("d40",)),
               QueryRecord("B", query_text="b", positive_document_ids=("d180",))]
    E = np.tile(np.eye(8)[0], (2, 1))
    out, report = mine_embeddings(E, queries, index, MineConfig(top_n=100, m_out=20, seed=1))
    constructed = ([r.query_id for r in out] == ["A"] and report.dropped_ids == ["B"]
                   and report.queries_in == 2 and report.emitted == 1 and report.dropped == 1
                   and "d40" not in out[0].negative_document_ids)

    rng = np.random.default_rng(777)
    violations = 0
    for _ in range(1000):
        n = int(rng.integers(2, 80))
        dim = int(rng.integers(2, 9))
        rows = rng.normal(size=(n, dim))
        idx = EmbeddingIndex([f"d{i}" for i in range(n)], (rows / np.linalg.norm(rows, axis=1, keepdims=True)).astype(np.float32))
        nq = int(rng.integers(1, 6))
        qs = [QueryRecord(f"q{i}", query_text="x",
                          positive_document_ids=tuple(f"d{j}" for j in rng.choice(n, size=int(rng.integers(1, min(n, 4) + 1)), replace=False)))
              for i in range(nq)]
        Q = rng.normal(size=(nq, dim))
        cfg = MineConfig(top_n=int(rng.integers(1, 100)), m_out=int(rng.integers(1, 30)), seed=int(rng.integers(2**31)))
        got, rep = mine_embeddings(Q, qs, idx, cfg)
        hits = batch_search(idx, Q / np.linalg.norm(Q, axis=1, keepdims=True), cfg.top_n)
        expect_kept = [qq.query_id for qq, hs in zip(qs, hits) if set(qq.positive_document_ids) & {h.docid for h in hs}]
        by_id = {r.query_id: r for r in got}
        violations += [r.query_id for r in got] != expect_kept
        violations += rep.emitted != len(expect_kept) or rep.dropped != nq - len(expect_kept)
        for qq, hs in zip(qs, hits):
            r = by_id.get(qq.query_id)
            if r is None:
                continue
            negs = r.negative_document_ids
            violations += bool(set(negs) & set(qq.positive_document_ids))
            violations += not set(negs) <= {h.docid for h in hs}
            violations += len(set(negs)) != len(negs) or len(negs) > cfg.m_out
    verdict("7 mining contract", constructed and violations == 0,
            f"A kept/B dropped={constructed}; 1000 random configs, violations={violations}")


def _text(rng, n):
    pool = string.ascii_letters + string.digits + " \"\\\n\té漢😀"
    return "".join(pool[i] for i in rng.integers(len(pool), size=n))


def _ident(rng, n):
    pool = string.ascii_letters + string.digits + "-_.é漢"
    return "".join(pool[i] for i in rng.integers(len(pool), size=n))


def _random_corpus_record(rng, i):
    kw = {}
    if rng.random() < 0.8:
        kw["document_text"] = _text(rng, int(rng.integers(0, 40)))
    if rng.random() < 0.3 or not kw:
        kw["document_image"] = f"img/{i}.png"
    if rng.random() < 0.2:
        kw["title"] = _text(rng, 5)
    return CorpusRecord(f"doc-{i}-{_ident(rng, 3)}", **kw)


def _random_query_record(rng, i):
    pos = tuple(f"p{j}" for j in range(int(rng.integers(0, 3))))
    neg = tuple(f"n{j}" for j in range(int(rng.integers(0, 4))))
    return QueryRecord(f"q{i}", query_text=_text(rng, int(rng.integers(1, 30))),
                       positive_document_ids=pos, negative_document_ids=neg)


def test_format_roundtrips(verdict):
    rng = np.random.default_rng(888)
    failures = 0
    n_cases = 1000
    for i in range(n_cases):
        c = _random_corpus_record(rng, i)
        line = dumps(c) + "\n"
        failures += dumps(parse_corpus(io.StringIO(line))[0]) + "\n" != line
        qr = _random_query_record(rng, i)
        line = dumps(qr) + "\n"
        failures += dumps(parse_queries(io.StringIO(line))[0]) + "\n" != line

        D, F = int(rng.integers(1, 9)), int(rng.integers(1, 33))
        dims = tuple(sorted(set(rng.integers(1, D + 1, size=2).tolist()) | {D}))
        p = ModelParams(rng.normal(size=(D, F)) * 10.0 ** rng.integers(-5, 5), float(rng.uniform(1e-3, 10)), dims)
        raw = checkpoint_bytes(p)
        failures += checkpoint_bytes(params_from_bytes(raw)) != raw

        n = int(rng.integers(0, 20))
        idx = EmbeddingIndex([f"é{j}-{_ident(rng, 2)}" for j in range(n)], rng.normal(size=(n, D)).astype(np.float32))
        raw = index_bytes(idx)
        failures += index_bytes(index_from_bytes(raw)) != raw

        rankings = {f"q{j}": [(f"d{t}", float(s)) for t, s in enumerate(np.sort(rng.normal(size=int(rng.integers(1, 6))))[::-1])]
                    for j in range(int(rng.integers(1, 4)))}
        text = format_run(Run(rankings, tag="sys"))
        failures += format_run(parse_run(text.splitlines(True))) != text
    verdict("8 format round-trips", failures == 0, f"{n_cases} cases x 5 formats, failures={failures}")


def test_determinism(verdict):
    task = learnability_task(n_docs=150, seed=4)
    ds = task.dataset()
    cfg = TrainConfig(batch_size=16, negatives=3, epochs=1, seed=9, dim=32, width=1024, mrl_dims=(16, 32))

    def run_all(threads):
        params, steps = train(cfg, [ds], threads=threads)
        plan = plan_epoch([ds, task.dataset("other", 2.0)], 16, 9)
        store = build_store(task.corpus)
        index = encode_corpus(params, store, threads=threads)
        feat = Featurizer(cfg.width, store)
        mined, _ = mine(params, task.queries, index, MineConfig(top_n=20, m_out=5, seed=3), feat, threads=threads)
        Q = encode_matrix(params, feat.matrix(task.queries, threads))
        hits = batch_search(index, Q, 10, 16, partitions=threads, threads=threads)
        return {
            "train": checkpoint_bytes(params) + json.dumps([s.as_dict() for s in steps]).encode(),
            "plan_epoch": repr(plan).encode(),
            "mine": "".join(dumps(r) + "\n" for r in mined).encode(),
            "search": format_run(Run.from_hits([q.query_id for q in task.queries], hits)).encode(),
        }

    a, b, c = run_all(1), run_all(1), run_all(4)
    differing = [k for k in a if not (a[k] == b[k] == c[k])]
    verdict("9 determinism", not differing,
            f"train/mine/plan_epoch/search across reruns and threads 1 vs 4; differing={differing or 'none'}")
