"""Self-adversarial negative sampling, Adam and the two-stage training loop."""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .data import ContextIndex, FilterIndex, TripleStore
from .numeric import log_sigmoid, sigmoid
from .ote import DegenerateMatrixError, OTEModel
from .scoring import score_batch

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-3
    gamma: float = 9.0
    alpha: float = 1.0
    n_neg: int = 256
    batch_size: int = 1024
    max_steps: int = 1000
    valid_interval: int = 10000
    patience: int = 5
    stage: str = "pretrain"
    neighbor_cap: int | None = 64
    seed: int = 0
    freeze_neighbors: bool = False
    det_check_interval: int = 1000
    log_interval: int = 100
    valid_limit: int | None = None

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.n_neg < 1:
            raise ValueError("n_neg must be at least 1")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")

    @property
    def objective(self) -> str:
        return "pretrain" if self.stage == "pretrain" else "all"

    def as_dict(self) -> dict:
        return asdict(self)


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose (and optional step number)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode()), *extra])


# ---------------------------------------------------------------------------
# negatives and loss


@dataclass
class NegativeBatch:
    positive: tuple[int, int, int]
    mode: str
    entities: np.ndarray
    scores: np.ndarray | None = None
    weights: np.ndarray | None = None

    @property
    def triples(self) -> np.ndarray:
        h, r, t = self.positive
        n = len(self.entities)
        if self.mode == "tail":
            return np.stack([np.full(n, h), np.full(n, r), self.entities], axis=1)
        return np.stack([self.entities, np.full(n, r), np.full(n, t)], axis=1)


def corrupt(original: np.ndarray, n_neg: int, num_entities: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform replacement entities, never equal to the original, shape ``(len(original), n_neg)``."""
    if num_entities < 2:
        raise ValueError("need at least two entities to draw negatives")
    original = np.asarray(original, dtype=np.int64).reshape(-1, 1)
    draws = rng.integers(0, num_entities - 1, size=(len(original), n_neg))
    return draws + (draws >= original)


def sample_negatives(pos, n_neg: int, mode: str, num_entities: int, rng: np.random.Generator) -> NegativeBatch:
    if mode not in ("head", "tail"):
        raise ValueError("mode must be 'head' or 'tail'")
    h, r, t = (int(x) for x in pos)
    original = t if mode == "tail" else h
    return NegativeBatch((h, r, t), mode, corrupt([original], n_neg, num_entities, rng)[0])


def adversarial_weights(neg_scores: np.ndarray, alpha: float, gamma: float = 0.0) -> np.ndarray:
    """Softmax of ``alpha * (gamma - d)`` over the last axis.

    Lower distance means a harder negative and a larger weight. ``gamma``
    cancels in the normalisation and only matters for overflow.
    """
    z = alpha * (gamma - np.asarray(neg_scores, dtype=np.float64))
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    return w / w.sum(axis=-1, keepdims=True)


def self_adversarial_loss(pos_scores, neg_scores, gamma: float, alpha: float):
    """Per-positive loss and its gradients with respect to the distances.

    ``L = -sum_j p_j log sigma(d_neg_j - gamma) - log sigma(gamma - d_pos)`` with
    the weights ``p`` held constant. Returns ``(loss, dpos, dneg)``.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    w = adversarial_weights(neg, alpha, gamma)
    loss = -np.sum(w * log_sigmoid(neg - gamma), axis=-1) - log_sigmoid(gamma - pos)
    dpos = sigmoid(pos - gamma)
    dneg = -w * sigmoid(gamma - neg)
    return loss, dpos, dneg


def loss(pos_score: float, negs: NegativeBatch, gamma: float, alpha: float) -> float:
    value, _, _ = self_adversarial_loss(pos_score, negs.scores, gamma, alpha)
    return float(value)


# ---------------------------------------------------------------------------
# objective


def batch_objective(
    model: OTEModel,
    pos: np.ndarray,
    neg_heads: np.ndarray,
    neg_tails: np.ndarray,
    gamma: float,
    alpha: float,
    objective: str = "pretrain",
    context: ContextIndex | None = None,
    cap: int | None = None,
    rng: np.random.Generator | None = None,
    freeze_neighbors: bool = False,
):
    """Mean over positives of the head-mode plus tail-mode loss, and its gradients."""
    pos = np.asarray(pos, dtype=np.int64).reshape(-1, 3)
    b, n = neg_tails.shape
    h, r, t = pos.T
    rep = lambda x: np.repeat(x, n)  # noqa: E731
    heads = np.concatenate([h, rep(h), neg_heads.reshape(-1)])
    rels = np.concatenate([r, rep(r), rep(r)])
    tails = np.concatenate([t, neg_tails.reshape(-1), rep(t)])
    scored = score_batch(model, heads, rels, tails, objective, context, cap, rng, freeze_neighbors)
    d = scored.scores
    d_pos = d[:b]
    d_tail = d[b : b + b * n].reshape(b, n)
    d_head = d[b + b * n :].reshape(b, n)
    loss_t, dpos_t, dneg_t = self_adversarial_loss(d_pos, d_tail, gamma, alpha)
    loss_h, dpos_h, dneg_h = self_adversarial_loss(d_pos, d_head, gamma, alpha)
    value = float(np.mean(loss_t + loss_h))
    g = np.concatenate([dpos_t + dpos_h, dneg_t.reshape(-1), dneg_h.reshape(-1)]) / b
    return value, scored.backward(g)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        p -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.dtype)
    return state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainData:
    train: TripleStore
    valid: TripleStore | None
    filter: FilterIndex
    context: ContextIndex


@dataclass
class TrainResult:
    model: OTEModel
    optimizer: AdamState
    step: int
    best_step: int
    best_mrr: float | None
    losses: list[float]
    history: list[dict]


def train_step(model: OTEModel, data: TrainData, tcfg: TrainConfig, state: AdamState, step: int) -> float:
    n_train = len(data.train)
    rng = stream(tcfg.seed, "batches", step)
    size = min(tcfg.batch_size, n_train)
    pos = data.train.array[rng.choice(n_train, size=size, replace=False)]
    neg_rng = stream(tcfg.seed, "negatives", step)
    N = model.cfg.num_entities
    neg_tails = corrupt(pos[:, 2], tcfg.n_neg, N, neg_rng)
    neg_heads = corrupt(pos[:, 0], tcfg.n_neg, N, neg_rng)
    for attempt in range(8):
        try:
            value, grads = batch_objective(
                model,
                pos,
                neg_heads,
                neg_tails,
                tcfg.gamma,
                tcfg.alpha,
                tcfg.objective,
                data.context,
                tcfg.neighbor_cap,
                stream(tcfg.seed, "neighbors", step),
                tcfg.freeze_neighbors,
            )
            break
        except DegenerateMatrixError as err:
            if attempt == 7 or len(err.index) != 2:
                raise
            logger.warning("step %d: %s; resetting that raw matrix", step, err)
            model.repair_degenerate(stream(tcfg.seed, "repair", step, attempt), force=err.index)
            for moments in (state.m, state.v):
                if "rel_mat" in moments:
                    moments["rel_mat"][err.index] = 0
    if not math.isfinite(value):
        bad = [k for k, v in model.params.items() if not np.all(np.isfinite(v))]
        raise TrainingDivergedError(f"step {step}: loss {value}; non-finite parameter blocks: {bad or 'none'}")
    before = model.params["rel_mat"].copy() if model.cfg.orthogonal else None
    adam_step(model.params, grads, state, tcfg.lr)
    if before is not None:
        flipped = guard_orientation(model, before, state)
        if flipped:
            logger.debug("step %d: kept orientation of %d raw matrices", step, len(flipped))
    model.bump()
    return value


def guard_orientation(model: OTEModel, before: np.ndarray, state: AdamState) -> list[tuple[int, int]]:
    """Undo updates that moved a raw matrix across ``det = 0``.

    Gram-Schmidt output is discontinuous there (the last column of ``Q``
    flips sign). An offending matrix is reset to the orthonormal form of its
    previous value, which gives the same transform with a well conditioned
    raw matrix, and its Adam moments are cleared.
    """
    from .ote import gram_schmidt

    old = np.sign(np.linalg.det(before.astype(np.float64)))
    new = np.sign(np.linalg.det(model.params["rel_mat"].astype(np.float64)))
    bad = np.argwhere(old * new <= 0)
    out = []
    for r, i in bad:
        try:
            q = gram_schmidt(before[r, i].astype(np.float64), tol=1e-12)
        except DegenerateMatrixError:
            continue
        model.params["rel_mat"][r, i] = q
        for moments in (state.m, state.v):
            if "rel_mat" in moments:
                moments["rel_mat"][r, i] = 0
        out.append((int(r), int(i)))
    return out


def train(
    model: OTEModel,
    data: TrainData,
    tcfg: TrainConfig,
    state: AdamState | None = None,
    start_step: int = 0,
    on_log: Callable[[str], None] | None = None,
) -> TrainResult:
    """Optimise ``model`` in place and return the best validation snapshot.

    Without a validation split the final parameters are returned. Every step
    draws its batch, negatives and neighbor samples from generators keyed by
    ``(seed, step)``, so a run resumed from a checkpoint follows the same
    trajectory as an uninterrupted one.
    """
    from .evaluate import ModelScorer, evaluate

    state = AdamState() if state is None else state
    emit = on_log or logger.info
    losses: list[float] = []
    history: list[dict] = []
    best_model, best_mrr, best_step, bad_evals = None, None, start_step, 0
    smoothed = None
    started = time.perf_counter()
    step = start_step
    for step in range(start_step, tcfg.max_steps):
        value = train_step(model, data, tcfg, state, step)
        losses.append(value)
        smoothed = value if smoothed is None else 0.9 * smoothed + 0.1 * value
        done = step + 1
        if tcfg.det_check_interval and done % tcfg.det_check_interval == 0:
            repaired = model.repair_degenerate(stream(tcfg.seed, "repair", step))
            if repaired:
                logger.warning("step %d: re-initialised degenerate relation matrices %s", done, repaired)
        evaluate_now = data.valid is not None and len(data.valid) and (
            (tcfg.valid_interval and done % tcfg.valid_interval == 0) or done == tcfg.max_steps
        )
        if evaluate_now:
            split = data.valid
            if tcfg.valid_limit is not None and len(split) > tcfg.valid_limit:
                split = TripleStore(split.split, split.array[: tcfg.valid_limit])
            scorer = ModelScorer(model, data.context if tcfg.stage == "finetune" else None)
            report = evaluate(split, scorer, data.filter)
            mrr, h10 = report.overall.mrr, report.overall.hits[10]
            history.append({"step": done, "loss": smoothed, "mrr": mrr, "hits10": h10})
            emit(
                f"step={done} loss={smoothed:.5f} valid_mrr={mrr:.4f} valid_h10={h10:.4f} "
                f"elapsed={time.perf_counter() - started:.1f}s"
            )
            if best_mrr is None or mrr > best_mrr:
                best_model, best_mrr, best_step, bad_evals = model.copy(), mrr, done, 0
            else:
                bad_evals += 1
                if bad_evals >= tcfg.patience:
                    emit(f"early stop at step {done}; best step {best_step} mrr={best_mrr:.4f}")
                    break
        elif tcfg.log_interval and done % tcfg.log_interval == 0:
            emit(f"step={done} loss={smoothed:.5f} elapsed={time.perf_counter() - started:.1f}s")
    final_step = step + 1 if tcfg.max_steps > start_step else start_step
    if best_model is None:
        best_model, best_step = model, final_step
    return TrainResult(best_model, state, final_step, best_step, best_mrr, losses, history)
