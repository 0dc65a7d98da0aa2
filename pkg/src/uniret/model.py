"""Linear embedding model, contrastive MRL objective with analytic gradients, Adam, training loop.

An embedding is ``W x`` normalized to unit length, where ``x`` is a feature
vector. For every Matryoshka dimension ``d`` the first ``d`` components are
re-normalized and scored against every document in the batch (in-batch
negatives), and the per-dimension cross-entropy losses are summed.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datastore import Dataset, TrainBatch, collate, plan_epoch, resolve_group
from .errors import (
    BadMagic,
    CountMismatch,
    DegenerateEmbedding,
    DegeneratePrefix,
    TruncatedFile,
    UniretError,
    UsageError,
    VersionMismatch,
)
from .featurize import DEFAULT_WIDTH, FeatureVec, Featurizer

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
DEFAULT_DIM = 64
DEFAULT_MRL_DIMS = (16, 32, 64)
DEFAULT_TAU = 0.02


def check_mrl_dims(dims: Sequence[int], dim: int) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if not dims or any(b <= a for a, b in zip(dims, dims[1:])) or dims[0] < 1 or dims[-1] != dim:
        raise UsageError(f"mrl_dims must be strictly increasing positive ints ending at {dim}, got {list(dims)}")
    return dims


@dataclass(eq=False)
class ModelParams:
    W: np.ndarray  # D x F, float64
    tau: float = DEFAULT_TAU
    mrl_dims: tuple[int, ...] = DEFAULT_MRL_DIMS

    def __post_init__(self):
        self.W = np.ascontiguousarray(self.W, dtype=np.float64)
        if self.W.ndim != 2:
            raise UsageError("W must be a matrix")
        if not self.tau > 0:
            raise UsageError(f"tau must be > 0, got {self.tau}")
        self.mrl_dims = check_mrl_dims(self.mrl_dims, self.dim)

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    @property
    def width(self) -> int:
        return self.W.shape[1]

    def equals(self, other: "ModelParams") -> bool:
        return (self.tau == other.tau and self.mrl_dims == other.mrl_dims
                and self.W.shape == other.W.shape and np.array_equal(self.W, other.W))


def init_params(dim: int = DEFAULT_DIM, width: int = DEFAULT_WIDTH, seed: int = 0,
                tau: float = DEFAULT_TAU, mrl_dims: Sequence[int] | None = None) -> ModelParams:
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, 1.0 / np.sqrt(width), size=(dim, width))
    dims = tuple(mrl_dims) if mrl_dims is not None else tuple(d for d in DEFAULT_MRL_DIMS if d < dim) + (dim,)
    return ModelParams(W, tau, dims)


def _as_dense(fv, width: int) -> np.ndarray:
    if isinstance(fv, FeatureVec):
        if fv.width != width:
            raise UsageError(f"feature width {fv.width} does not match model width {width}")
        return fv.dense()
    x = np.asarray(fv, dtype=np.float64)
    if x.shape[-1] != width:
        raise UsageError(f"feature width {x.shape[-1]} does not match model width {width}")
    return x


def encode(params: ModelParams, fv) -> np.ndarray:
    """Unit-norm embedding of one feature vector."""
    return encode_matrix(params, _as_dense(fv, params.width)[None, :])[0]


def encode_matrix(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Row-wise :func:`encode` for a dense ``n x F`` feature matrix."""
    U = np.asarray(X, dtype=np.float64) @ params.W.T
    norms = np.linalg.norm(U, axis=1)
    bad = np.flatnonzero(norms < NORM_FLOOR)
    if bad.size:
        raise DegenerateEmbedding(f"{bad.size} input(s) project to a zero vector (first row {bad[0]})")
    return U / norms[:, None]


def mrl_truncate(e: np.ndarray, d: int) -> np.ndarray:
    """First ``d`` components, re-normalized. Works on a vector or row-wise on a matrix."""
    e = np.asarray(e)
    if not 1 <= d <= e.shape[-1]:
        raise UsageError(f"truncation dim {d} outside [1, {e.shape[-1]}]")
    if d == e.shape[-1]:
        return e
    p = e[..., :d]
    n = np.linalg.norm(p, axis=-1, keepdims=True)
    if np.any(n < NORM_FLOOR):
        raise DegeneratePrefix(f"prefix of length {d} has zero norm")
    return p / n


@dataclass
class LossTerms:
    loss: float
    grad: np.ndarray
    per_dim: dict[int, float]


def _log_softmax_ce(S: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the score matrix."""
    B = S.shape[0]
    smax = S.max(axis=1, keepdims=True)
    Z = np.exp(S - smax)
    denom = Z.sum(axis=1, keepdims=True)
    lse = np.log(denom) + smax
    rows = np.arange(B)
    loss = float(np.mean(lse[:, 0] - S[rows, targets]))
    G = Z / denom
    G[rows, targets] -= 1.0
    return loss, G / B


def _unit_rows(P: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(P, axis=1)
    if np.any(n < NORM_FLOOR):
        raise DegeneratePrefix(f"zero-norm {what} prefix of length {P.shape[1]}")
    return P / n[:, None], n


def contrastive_terms(params: ModelParams, batch: TrainBatch,
                      dim_weights: Sequence[float] | None = None) -> LossTerms:
    """Summed per-dimension InfoNCE loss and its exact gradient w.r.t. ``W``."""
    W, tau = params.W, params.tau
    Xq, Xd, t = batch.queries, batch.docs, batch.targets
    Uq, Ud = Xq @ W.T, Xd @ W.T
    for U, what in ((Uq, "query"), (Ud, "document")):
        if np.any(np.linalg.norm(U, axis=1) < NORM_FLOOR):
            raise DegenerateEmbedding(f"a {what} projects to a zero vector")
    weights = np.ones(len(params.mrl_dims)) if dim_weights is None else np.asarray(dim_weights, dtype=np.float64)
    if weights.shape != (len(params.mrl_dims),):
        raise UsageError("one MRL weight per MRL dimension required")

    gUq, gUd = np.zeros_like(Uq), np.zeros_like(Ud)
    total, per_dim = 0.0, {}
    for d, w in zip(params.mrl_dims, weights):  # fixed ascending order
        Eq, nq = _unit_rows(Uq[:, :d], "query")
        Ed, nd = _unit_rows(Ud[:, :d], "document")
        loss_d, G = _log_softmax_ce(Eq @ Ed.T / tau, t)
        per_dim[d] = loss_d
        total += w * loss_d
        gEq = G @ Ed / tau
        gEd = G.T @ Eq / tau
        # d(p/|p|)/dp applied to the upstream gradient
        gUq[:, :d] += w * (gEq - Eq * np.sum(gEq * Eq, axis=1, keepdims=True)) / nq[:, None]
        gUd[:, :d] += w * (gEd - Ed * np.sum(gEd * Ed, axis=1, keepdims=True)) / nd[:, None]
    grad = gUq.T @ Xq + gUd.T @ Xd
    return LossTerms(total, grad, per_dim)


def loss_and_grad(params: ModelParams, batch: TrainBatch,
                  dim_weights: Sequence[float] | None = None) -> tuple[float, np.ndarray]:
    terms = contrastive_terms(params, batch, dim_weights)
    return terms.loss, terms.grad


def batch_loss(params: ModelParams, batch: TrainBatch, dim_weights: Sequence[float] | None = None) -> float:
    return contrastive_terms(params, batch, dim_weights).loss


@dataclass(eq=False)
class OptState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams, lr: float = 1e-3,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> "OptState":
        return cls(np.zeros_like(params.W), np.zeros_like(params.W), 0, lr, betas, eps)


def adam_step(params: ModelParams, state: OptState, grad: np.ndarray) -> tuple[ModelParams, OptState]:
    """One bias-corrected Adam update. Inputs are not mutated."""
    if grad.shape != params.W.shape or state.m.shape != params.W.shape:
        raise UsageError("gradient / optimizer state shape does not match W")
    b1, b2 = state.betas
    step = state.step + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** step)
    v_hat = v / (1.0 - b2 ** step)
    W = params.W - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(params, W=W), replace(state, m=m, v=v, step=step)


@dataclass
class TrainConfig:
    batch_size: int = 128
    negatives: int = 3
    epochs: int = 1
    lr: float = 1e-3
    seed: int = 0
    dim: int = DEFAULT_DIM
    width: int = DEFAULT_WIDTH
    tau: float = DEFAULT_TAU
    mrl_dims: tuple[int, ...] = DEFAULT_MRL_DIMS
    mrl_weights: tuple[float, ...] | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if self.negatives < 0:
            raise UsageError("negatives must be >= 0")
        self.mrl_dims = check_mrl_dims(self.mrl_dims, self.dim)


@dataclass
class StepLog:
    step: int
    dataset: str
    loss_total: float
    loss_per_dim: dict[int, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "step": self.step,
            "dataset": self.dataset,
            "loss_total": self.loss_total,
            "loss_per_dim": {str(k): v for k, v in self.loss_per_dim.items()},
        }


def train(config: TrainConfig, datasets: Sequence[Dataset], params: ModelParams | None = None,
          threads: int = 1, on_step: Callable[[StepLog], None] | None = None) -> tuple[ModelParams, list[StepLog]]:
    """Run ``config.epochs`` epochs of plan -> resolve -> collate -> loss -> Adam.

    Every batch gets its own RNG seeded from ``(seed, epoch, batch)``, so the
    result does not depend on ``threads``.
    """
    if params is None:
        params = init_params(config.dim, config.width, config.seed, config.tau, config.mrl_dims)
    elif params.width != config.width or params.dim != config.dim:
        raise UsageError("initial params do not match configured dim/width")
    state = OptState.fresh(params, config.lr, config.betas, config.eps)
    featurizers = [Featurizer(config.width, ds.store) for ds in datasets]
    log: list[StepLog] = []
    for epoch in range(config.epochs):
        plan = plan_epoch(datasets, config.batch_size, [config.seed, epoch])
        for b, asg in enumerate(plan):
            ds = datasets[asg.dataset]
            try:
                rng = np.random.default_rng([config.seed, epoch, b])
                groups = [resolve_group(ds.store, ds.queries[i], config.negatives, rng) for i in asg.query_indices]
                batch = collate(groups, featurizers[asg.dataset], threads)
                terms = contrastive_terms(params, batch, config.mrl_weights)
            except UniretError as e:
                e.args = (f"dataset {asg.name!r}, epoch {epoch}, batch {b}: {e}",)
                raise
            params, state = adam_step(params, state, terms.grad)
            entry = StepLog(len(log), asg.name, terms.loss, terms.per_dim)
            log.append(entry)
            if on_step is not None:
                on_step(entry)
    return params, log


# -- checkpoint file ---------------------------------------------------------

CKPT_MAGIC = b"URET"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sHIIdI")


def checkpoint_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, params.dim, params.width, params.tau, len(params.mrl_dims)))
    buf.write(struct.pack(f"<{len(params.mrl_dims)}I", *params.mrl_dims))
    buf.write(params.W.astype("<f8", copy=False).tobytes(order="C"))
    return buf.getvalue()


def params_from_bytes(data: bytes) -> ModelParams:
    if len(data) < 4 or data[:4] != CKPT_MAGIC:
        raise BadMagic("not a model checkpoint (bad magic)")
    if len(data) < _CKPT_HEAD.size:
        raise TruncatedFile("checkpoint header truncated")
    _, version, D, F, tau, n_dims = _CKPT_HEAD.unpack_from(data)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}")
    off = _CKPT_HEAD.size
    need = off + 4 * n_dims + 8 * D * F
    if len(data) < need:
        raise TruncatedFile(f"checkpoint has {len(data)} bytes, expected {need}")
    if len(data) > need:
        raise CountMismatch(f"checkpoint has {len(data) - need} trailing bytes")
    dims = struct.unpack_from(f"<{n_dims}I", data, off)
    off += 4 * n_dims
    W = np.frombuffer(data, dtype="<f8", count=D * F, offset=off).reshape(D, F).astype(np.float64)
    return ModelParams(W, tau, dims)


def save_checkpoint(path: str | Path, params: ModelParams) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path: str | Path) -> ModelParams:
    return params_from_bytes(Path(path).read_bytes())
