"""Graph-context representations and the four-term distance.

The tail-side context of ``t`` averages the forward projections of every
training ``(h', r')`` pointing into ``t`` together with ``e_t`` itself; the
head-side context of ``h`` averages the backward projections of every
``(r', t')`` leaving ``h`` together with ``e_h``. Including the entity's own
embedding keeps the average defined for isolated entities, where it reduces
to the embedding exactly.
"""

from __future__ import annotations

import numpy as np

from .data import ContextIndex
from .numeric import group_distance
from .ote import OTEModel, distance_backward, distance_forward, project_backward, project_forward
from .scoring import context_block


class StaleContextError(RuntimeError):
    pass


def _sample(pairs: list, cap: int | None, rng: np.random.Generator | None) -> list:
    if cap is None or len(pairs) <= cap:
        return pairs
    if rng is None:
        raise ValueError("a generator is required when sampling capped neighborhoods")
    pick = np.sort(rng.choice(len(pairs), size=cap, replace=False))
    return [pairs[i] for i in pick]


def context_repr_tail(
    model: OTEModel, t: int, index: ContextIndex, cap: int | None = None, rng: np.random.Generator | None = None
) -> np.ndarray:
    ent = model.params["entity"]
    pairs = _sample(index.head_rel_pairs(t), cap, rng)
    total = np.zeros_like(ent[t])
    for h_, r_ in pairs:
        total = total + project_forward(ent[h_], model.relation_params(r_), model.cfg)
    return (total + ent[t]) / (len(pairs) + 1)


def context_repr_head(
    model: OTEModel, h: int, index: ContextIndex, cap: int | None = None, rng: np.random.Generator | None = None
) -> np.ndarray:
    ent = model.params["entity"]
    pairs = _sample(index.rel_tail_pairs(h), cap, rng)
    total = np.zeros_like(ent[h])
    for r_, t_ in pairs:
        total = total + project_backward(ent[t_], model.relation_params(r_), model.cfg)
    return (total + ent[h]) / (len(pairs) + 1)


def _grouped(a, b, model):
    K, ds = model.cfg.num_groups, model.cfg.sub_dim
    dist, _ = group_distance(np.asarray(a).reshape(K, ds) - np.asarray(b).reshape(K, ds))
    return float(dist)


def distance_context_tail(model: OTEModel, h: int, r: int, t: int, index: ContextIndex, tail_context=None) -> float:
    """Distance between the forward projection of ``h`` and the context of ``t``."""
    ent = model.params["entity"]
    proj = project_forward(ent[h], model.relation_params(r), model.cfg)
    ctx = context_repr_tail(model, t, index) if tail_context is None else tail_context
    return _grouped(proj, ctx, model)


def distance_context_head(model: OTEModel, h: int, r: int, t: int, index: ContextIndex, head_context=None) -> float:
    ent = model.params["entity"]
    proj = project_backward(ent[t], model.relation_params(r), model.cfg)
    ctx = context_repr_head(model, h, index) if head_context is None else head_context
    return _grouped(proj, ctx, model)


def score_all(model: OTEModel, h: int, r: int, t: int, index: ContextIndex) -> float:
    d_f = distance_forward(model, h, r, t)
    d_b = distance_backward(model, h, r, t)
    d_ct = distance_context_tail(model, h, r, t, index)
    d_ch = distance_context_head(model, h, r, t, index)
    return (d_f + d_ct) + (d_b + d_ch)


class ContextCache:
    """Full-neighborhood context representations of every entity.

    ``tail`` and ``head`` are ``(N, K, d_s)`` arrays valid for the model
    version recorded in ``version``.
    """

    def __init__(self, tail: np.ndarray, head: np.ndarray, version: int, model_id: int):
        self.tail = tail
        self.head = head
        self.version = version
        self._model_id = model_id

    def is_stale(self, model: OTEModel) -> bool:
        return self._model_id != id(model) or self.version != model.version

    def check(self, model: OTEModel) -> None:
        if self.is_stale(model):
            raise StaleContextError(
                f"context cache built at version {self.version}, model is at version {model.version}"
            )


def refresh_context_cache(model: OTEModel, index: ContextIndex) -> ContextCache:
    E = model.entity_groups
    F, B, _ = model.operators()
    everyone = np.arange(model.cfg.num_entities)
    tail = context_block(E, F, index.incoming, everyone).values
    head = context_block(E, B, index.outgoing, everyone).values
    return ContextCache(tail, head, model.version, id(model))
