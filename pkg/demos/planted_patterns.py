"""
Learning relation patterns on a planted graph
=============================================

A 200-entity graph is wired with one symmetric relation, an inverse pair and
a composition triple. Part of each pattern is held out. After training, the
held-out triples can only be ranked well if the model picked up the pattern,
and the learned relation transforms should satisfy it almost exactly.

Run with ``python demos/planted_patterns.py`` (about two minutes).
"""

import time

import numpy as np

from gcote.data import ContextIndex, FilterIndex, TripleStore
from gcote.evaluate import ModelScorer, evaluate
from gcote.ote import (
    ModelConfig,
    OTEModel,
    composition_residual,
    inverse_residual,
    relation_transform,
    symmetry_residual,
)
from gcote.synthetic import planted_patterns_kg
from gcote.train import TrainConfig, TrainData, train

# build the graph; kg.held_out maps each pattern to its test triples
kg = planted_patterns_kg(num_entities=200, seed=0)
ds = kg.dataset
N = ds.vocab.num_entities
print(f"{N} entities, {ds.vocab.num_relations} relations, {len(ds.train)} training triples")
for pattern, triples in kg.held_out.items():
    print(f"  held out for {pattern}: {len(triples)}")

# a small OTE model: 8 groups of 4 dimensions
cfg = ModelConfig(N, ds.vocab.num_relations, dim=32, sub_dim=4, variant="OTE")
model = OTEModel.random(cfg, np.random.default_rng(0), gamma=6.0)

filt = FilterIndex([ds.train, ds.test])
data = TrainData(ds.train, None, filt, ContextIndex(ds.train, N))
tcfg = TrainConfig(lr=0.01, gamma=6.0, alpha=1.0, n_neg=64, batch_size=256, max_steps=3000, log_interval=500)

started = time.perf_counter()
train(model, data, tcfg, on_log=print)
print(f"trained in {time.perf_counter() - started:.0f}s\n")

# filtered Hits@10 on the held-out triples of each pattern
scorer = ModelScorer(model)
for pattern, triples in kg.held_out.items():
    report = evaluate(TripleStore("test", triples), scorer, filt)
    print(f"{pattern:<12} Hits@10={report.overall.hits[10]:.3f}  MRR={report.overall.mrr:.3f}")

# how closely the learned transforms satisfy each pattern (0 is exact)
m64 = model.astype(np.float64)


def T(r):
    return relation_transform(m64, r)


(i1, i2), (c1, c2, c3) = kg.inverse[0], kg.composition[0]
print()
print(f"symmetry residual    {symmetry_residual(*T(kg.symmetric[0])):.4f}")
print(f"inverse residual     {inverse_residual(*T(i1), *T(i2)):.4f}")
print(f"composition residual {composition_residual(*T(c1), *T(c2), *T(c3)):.4f}")

# the same residuals for relations that carry no pattern, for scale
fresh = OTEModel.random(cfg, np.random.default_rng(1), gamma=6.0, dtype=np.float64)
print(f"random relation, symmetry residual {symmetry_residual(*relation_transform(fresh, 0)):.4f}")
