"""Batched distance scores with a hand-written backward pass.

:func:`score_batch` scores arrays of ``(h, r, t)`` triples under either the
pretraining objective ``d((h,r),t) + d(h,(r,t))`` or the full context
objective that adds both graph-context distances, and returns a closure that
maps gradients on the scores to gradients on every parameter block.

Projections are computed once per distinct ``(h, r)`` / ``(r, t)`` pair and
applied relation by relation as batched matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import sparse

from .data import ContextIndex
from .numeric import group_distance
from .ote import OTEModel

OBJECTIVES = ("pretrain", "all")


def scatter_rows(index: np.ndarray, values: np.ndarray, size: int) -> np.ndarray:
    """``out[index[j]] += values[j]`` with a fixed summation order."""
    n = len(index)
    if n == 0:
        return np.zeros((size,) + values.shape[1:], dtype=values.dtype)
    onehot = sparse.csr_matrix((np.ones(n, dtype=values.dtype), (index, np.arange(n))), shape=(size, n))
    return np.asarray(onehot @ values.reshape(n, -1)).reshape((size,) + values.shape[1:])


class RelationSegments:
    """Rows grouped by relation id for per-relation batched products."""

    def __init__(self, rel: np.ndarray, num_relations: int):
        self.rel = rel
        self.order = np.argsort(rel, kind="stable")
        self.bounds = np.searchsorted(rel[self.order], np.arange(num_relations + 1))
        self.num_relations = num_relations

    def _segments(self):
        for r in range(self.num_relations):
            lo, hi = self.bounds[r], self.bounds[r + 1]
            if hi > lo:
                yield r, self.order[lo:hi]

    def apply(self, ops: np.ndarray, x: np.ndarray, transpose: bool = False) -> np.ndarray:
        """``y[j] = ops[rel[j]] @ x[j]`` groupwise (``ops^T`` with ``transpose``)."""
        y = np.empty_like(x)
        for r, idx in self._segments():
            op = ops[r] if transpose else np.swapaxes(ops[r], -1, -2)
            # (K, n, d_s) @ (K, d_s, d_s)
            y[idx] = np.swapaxes(np.swapaxes(x[idx], 0, 1) @ op, 0, 1)
        return y

    def outer_sum(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Per relation, ``sum_j a[j] b[j]^T`` for every group."""
        K, ds = a.shape[1], a.shape[2]
        out = np.zeros((self.num_relations, K, ds, ds), dtype=a.dtype)
        for r, idx in self._segments():
            out[r] = np.swapaxes(a[idx], 0, 1).transpose(0, 2, 1) @ np.swapaxes(b[idx], 0, 1)
        return out


@dataclass
class ContextBlock:
    """Context representations for a set of entities and what backward needs."""

    entities: np.ndarray
    values: np.ndarray  # (m, K, d_s)
    segment: np.ndarray
    neighbor: np.ndarray
    counts: np.ndarray
    segments: RelationSegments


def context_block(
    E: np.ndarray,
    ops: np.ndarray,
    adjacency,
    entities: np.ndarray,
    cap: int | None = None,
    rng: np.random.Generator | None = None,
) -> ContextBlock:
    """Smoothed neighborhood averages for ``entities``.

    ``adjacency`` is one side of a :class:`ContextIndex`. On the incoming side
    each pair is ``(h', r')`` and contributes ``ops[r'] e_h'``; on the
    outgoing side each pair is ``(r', t')`` and contributes ``ops[r'] e_t'``.
    """
    seg, a, b, counts = adjacency.gather(entities, cap, rng)
    rel, nb = (a, b) if adjacency.side == "outgoing" else (b, a)
    segments = RelationSegments(rel, len(ops))
    proj = segments.apply(ops, E[nb])
    sums = scatter_rows(seg, proj, len(entities))
    values = (sums + E[entities]) / (counts + 1)[:, None, None].astype(E.dtype)
    return ContextBlock(entities, values, seg, nb, counts, segments)


def context_block_backward(block: ContextBlock, E: np.ndarray, ops: np.ndarray, dvalues: np.ndarray, freeze_neighbors=False):
    """``(entity_parts, dops)``: entity gradient pieces as ``(index, values)`` and the operator gradient."""
    dsum = dvalues / (block.counts + 1)[:, None, None].astype(dvalues.dtype)
    dproj = dsum[block.segment]
    parts = [(block.entities, dsum)]
    if not freeze_neighbors:
        parts.append((block.neighbor, block.segments.apply(ops, dproj, transpose=True)))
    return parts, block.segments.outer_sum(dproj, E[block.neighbor])


@dataclass
class BatchScores:
    scores: np.ndarray
    terms: dict[str, np.ndarray]
    backward: Callable[..., dict[str, np.ndarray]]


def _pairs(ent: np.ndarray, rel: np.ndarray, num_entities: int):
    key = rel * num_entities + ent
    uniq, inv = np.unique(key, return_inverse=True)
    return uniq % num_entities, uniq // num_entities, inv.reshape(-1)


def score_batch(
    model: OTEModel,
    h: np.ndarray,
    r: np.ndarray,
    t: np.ndarray,
    objective: str = "pretrain",
    context: ContextIndex | None = None,
    cap: int | None = None,
    rng: np.random.Generator | None = None,
    freeze_neighbors: bool = False,
) -> BatchScores:
    """Distances for the triples ``(h[j], r[j], t[j])``.

    The four context-objective terms are summed as
    ``(d_fwd + d_ctx_tail) + (d_bwd + d_ctx_head)`` so that with empty
    neighborhoods the total is exactly ``2 * (d_fwd + d_bwd)``.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    if objective == "all" and context is None:
        raise ValueError("the context objective needs a ContextIndex")
    cfg = model.cfg
    N, R = cfg.num_entities, cfg.num_relations
    h, r, t = (np.asarray(x, dtype=np.int64).reshape(-1) for x in (h, r, t))
    E = model.entity_groups
    F, B, op_cache = model.operators()

    fh, fr, f_inv = _pairs(h, r, N)
    bt, br, b_inv = _pairs(t, r, N)
    f_seg = RelationSegments(fr, R)
    b_seg = RelationSegments(br, R)
    pf = f_seg.apply(F, E[fh])[f_inv]
    pb = b_seg.apply(B, E[bt])[b_inv]
    eh, et = E[h], E[t]
    d_f, u_f = group_distance(pf - et)
    d_b, u_b = group_distance(pb - eh)
    terms = {"forward": d_f, "backward": d_b}

    if objective == "all":
        ut, inv_t = np.unique(t, return_inverse=True)
        uh, inv_h = np.unique(h, return_inverse=True)
        tail_ctx = context_block(E, F, context.incoming, ut, cap, rng)
        head_ctx = context_block(E, B, context.outgoing, uh, cap, rng)
        d_ct, u_ct = group_distance(pf - tail_ctx.values[inv_t])
        d_ch, u_ch = group_distance(pb - head_ctx.values[inv_h])
        terms.update(context_tail=d_ct, context_head=d_ch)
        scores = (d_f + d_ct) + (d_b + d_ch)
    else:
        scores = d_f + d_b

    def backward(g: np.ndarray, only=None) -> dict[str, np.ndarray]:
        """Gradients of ``sum_j g[j] * scores[j]``, or of the named ``terms`` in ``only``."""
        g = np.asarray(g, dtype=E.dtype).reshape(-1, 1, 1)
        keep = set(terms) if only is None else set(only)
        if not keep <= set(terms):
            raise ValueError(f"unknown terms {sorted(keep - set(terms))}")
        w = {k: (g if k in keep else np.zeros_like(g)) for k in terms}
        gpf = w["forward"] * u_f
        gpb = w["backward"] * u_b
        ent_parts = [(t, -gpf), (h, -gpb)]
        dF = np.zeros_like(F)
        dB = np.zeros_like(B)
        if objective == "all":
            gpf = gpf + w["context_tail"] * u_ct
            gpb = gpb + w["context_head"] * u_ch
            dct = scatter_rows(inv_t, -w["context_tail"] * u_ct, len(ut))
            dch = scatter_rows(inv_h, -w["context_head"] * u_ch, len(uh))
            parts, dops = context_block_backward(tail_ctx, E, F, dct, freeze_neighbors)
            ent_parts += parts
            dF += dops
            parts, dops = context_block_backward(head_ctx, E, B, dch, freeze_neighbors)
            ent_parts += parts
            dB += dops
        gpf_u = scatter_rows(f_inv, gpf, len(fh))
        gpb_u = scatter_rows(b_inv, gpb, len(bt))
        ent_parts.append((fh, f_seg.apply(F, gpf_u, transpose=True)))
        ent_parts.append((bt, b_seg.apply(B, gpb_u, transpose=True)))
        dF += f_seg.outer_sum(gpf_u, E[fh])
        dB += b_seg.outer_sum(gpb_u, E[bt])

        idx = np.concatenate([p[0] for p in ent_parts])
        vals = np.concatenate([p[1] for p in ent_parts])
        dE = scatter_rows(idx, vals, N)
        grads = {"entity": dE.reshape(N, cfg.dim)}
        grads.update(model.operators_vjp(op_cache, dF, dB))
        return grads

    return BatchScores(scores, terms, backward)
