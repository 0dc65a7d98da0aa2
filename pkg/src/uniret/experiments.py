"""Desk-scale experiments on the synthetic learnability task."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .datastore import build_store
from .evaluation import Run, ndcg_at_k, recall_at_k
from .featurize import Featurizer
from .index import batch_search, encode_corpus
from .model import ModelParams, TrainConfig, encode_matrix, init_params, train
from .synthetic import LearnabilityTask, learnability_task

log = logging.getLogger(__name__)


@dataclass
class RetrievalScores:
    recall_at_1: dict[int, float] = field(default_factory=dict)  # keyed by truncation dim
    ndcg_at_10: dict[int, float] = field(default_factory=dict)


def score_model(params: ModelParams, task: LearnabilityTask, dims=None, threads: int = 1) -> RetrievalScores:
    """Recall@1 and nDCG@10 of exact search over the task corpus at each truncation dim."""
    store = build_store(task.corpus)
    index = encode_corpus(params, store, threads=threads)
    Q = encode_matrix(params, Featurizer(params.width, store).matrix(task.queries, threads))
    qids = [q.query_id for q in task.queries]
    out = RetrievalScores()
    for d in dims or (params.dim,):
        hits = batch_search(index, Q, 10, None if d == params.dim else d, threads=threads)
        run = Run.from_hits(qids, hits)
        out.recall_at_1[d] = recall_at_k(run, task.qrels, 1).mean
        out.ndcg_at_10[d] = ndcg_at_k(run, task.qrels, 10).mean
    return out


@dataclass
class LearnabilityResult:
    seed: int
    mrl_dims: tuple[int, ...]
    baseline: RetrievalScores
    trained: RetrievalScores
    first_loss: float
    last_loss: float


def run_learnability(seed: int, mrl_dims=(16, 32, 64), eval_dims=(16, 32, 64), epochs: int = 1,
                     batch_size: int = 32, negatives: int = 3, threads: int = 1,
                     task: LearnabilityTask | None = None) -> LearnabilityResult:
    """Score the untrained model, train with defaults otherwise, and score again."""
    task = task or learnability_task(seed=seed)
    cfg = TrainConfig(batch_size=batch_size, negatives=negatives, epochs=epochs, seed=seed, mrl_dims=tuple(mrl_dims))
    init = init_params(cfg.dim, cfg.width, seed, cfg.tau, cfg.mrl_dims)
    baseline = score_model(init, task, eval_dims, threads)
    params, steps = train(cfg, [task.dataset()], init, threads=threads)
    trained = score_model(params, task, eval_dims, threads)
    log.info("seed %d dims %s: R@1 %.3f -> %.3f", seed, mrl_dims,
             baseline.recall_at_1[cfg.dim], trained.recall_at_1[cfg.dim])
    return LearnabilityResult(seed, cfg.mrl_dims, baseline, trained, steps[0].loss_total, steps[-1].loss_total)
