"""Filtered link-prediction ranking and metric reports.

Each triple is ranked twice: once with the tail masked ``(h, r, ?)`` and once
with the head masked ``(?, r, t)``. Candidates that form any other known true
triple are dropped before ranking. Ties are split evenly:
``rank = 1 + #better + #tied / 2``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .context import ContextCache, refresh_context_cache
from .data import CATEGORIES, ContextIndex, FilterIndex, PairCounts, TripleStore, classify_triple
from .numeric import group_norms
from .ote import OTEModel

HITS_AT = (1, 3, 10)
DIRECTIONS = ("head", "tail")


class CandidateScorer(Protocol):
    num_entities: int

    def score_tails(self, h: int, r: int) -> np.ndarray: ...

    def score_heads(self, r: int, t: int) -> np.ndarray: ...


class ModelScorer:
    """Distances of every candidate entity under a frozen model.

    With a :class:`ContextIndex` the full four-term distance is used, drawing
    context representations from a cache that is refreshed whenever the model
    version moves.
    """

    def __init__(self, model: OTEModel, context: ContextIndex | None = None):
        self.model = model
        self.context = context
        self.num_entities = model.cfg.num_entities
        self._cache: ContextCache | None = None
        self._version = None
        self._refresh()

    def _refresh(self):
        self.E = self.model.entity_groups
        self.F, self.B, _ = self.model.operators()
        if self.context is not None:
            self._cache = refresh_context_cache(self.model, self.context)
        self._version = self.model.version

    def _ensure_fresh(self):
        if self._version != self.model.version:
            self._refresh()

    def score_tails(self, h: int, r: int) -> np.ndarray:
        self._ensure_fresh()
        E = self.E
        pf = np.einsum("kij,kj->ki", self.F[r], E[h])
        pb = np.einsum("kij,nkj->nki", self.B[r], E)
        d_f = group_norms(pf - E).sum(-1)
        d_b = group_norms(pb - E[h]).sum(-1)
        if self._cache is None:
            return d_f + d_b
        d_ct = group_norms(pf - self._cache.tail).sum(-1)
        d_ch = group_norms(pb - self._cache.head[h]).sum(-1)
        return (d_f + d_ct) + (d_b + d_ch)

    def score_heads(self, r: int, t: int) -> np.ndarray:
        self._ensure_fresh()
        E = self.E
        pf = np.einsum("kij,nkj->nki", self.F[r], E)
        pb = np.einsum("kij,kj->ki", self.B[r], E[t])
        d_f = group_norms(pf - E[t]).sum(-1)
        d_b = group_norms(pb - E).sum(-1)
        if self._cache is None:
            return d_f + d_b
        d_ct = group_norms(pf - self._cache.tail[t]).sum(-1)
        d_ch = group_norms(pb - self._cache.head).sum(-1)
        return (d_f + d_ct) + (d_b + d_ch)


@dataclass(frozen=True)
class RankResult:
    triple: tuple[int, int, int]
    direction: str
    rank: float
    category: str | None = None


def filtered_rank(scores: np.ndarray, target: int, known: set[int]) -> float:
    """Tie-averaged rank of ``target`` among candidates not in ``known`` (target kept)."""
    keep = np.ones(len(scores), dtype=bool)
    if known:
        keep[list(known)] = False
    keep[target] = False
    others = scores[keep]
    s = scores[target]
    better = np.count_nonzero(others < s)
    tied = np.count_nonzero(others == s)
    return 1.0 + better + tied / 2.0


def rank_triple(triple, direction: str, scorer: CandidateScorer, filt: FilterIndex, category=None) -> RankResult:
    h, r, t = (int(x) for x in triple)
    if direction == "tail":
        rank = filtered_rank(scorer.score_tails(h, r), t, filt.true_tails(h, r))
    elif direction == "head":
        rank = filtered_rank(scorer.score_heads(r, t), h, filt.true_heads(r, t))
    else:
        raise ValueError("direction must be 'head' or 'tail'")
    return RankResult((h, r, t), direction, rank, category)


@dataclass
class Metrics:
    count: int = 0
    mrr: float = 0.0
    hits: dict[int, float] = field(default_factory=lambda: {k: 0.0 for k in HITS_AT})

    @classmethod
    def from_ranks(cls, ranks) -> "Metrics":
        ranks = np.asarray(list(ranks), dtype=np.float64)
        if ranks.size == 0:
            return cls()
        return cls(
            int(ranks.size),
            float(np.mean(1.0 / ranks)),
            {k: float(np.mean(ranks <= k)) for k in HITS_AT},
        )


@dataclass
class EvalReport:
    """Metrics overall, per direction and per category x direction.

    ``category_average`` holds two readings of a category's combined Hits@10:
    ``micro`` pools all head and tail instances, ``macro`` averages the head and
    tail figures.
    """

    overall: Metrics
    directions: dict[str, Metrics]
    categories: dict[str, dict[str, Metrics]]
    category_counts: dict[str, int]
    category_average: dict[str, dict[str, float]]
    ranks: list[RankResult] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict[str, float]:
        """Flat ``key -> value`` mapping used by the structured format."""
        out: dict[str, float] = {}

        def put(prefix, m: Metrics):
            out[f"{prefix}.count"] = m.count
            out[f"{prefix}.mrr"] = m.mrr
            for k in HITS_AT:
                out[f"{prefix}.hits@{k}"] = m.hits[k]

        put("overall", self.overall)
        for d, m in self.directions.items():
            put(d, m)
        for c in CATEGORIES:
            out[f"category.{c}.triples"] = self.category_counts.get(c, 0)
            for d in DIRECTIONS:
                put(f"category.{c}.{d}", self.categories[c][d])
            for kind, value in self.category_average[c].items():
                out[f"category.{c}.{kind}.hits@10"] = value
        return out


def evaluate(
    split: TripleStore,
    scorer: CandidateScorer,
    filt: FilterIndex,
    counts: PairCounts | None = None,
    keep_ranks: bool = False,
) -> EvalReport:
    """Rank both directions of every triple in ``split`` and aggregate."""
    results: list[RankResult] = []
    for h, r, t in split.array.tolist():
        cat = classify_triple((h, r, t), counts) if counts is not None else None
        for direction in DIRECTIONS:
            results.append(rank_triple((h, r, t), direction, scorer, filt, cat))
    return aggregate(results, keep_ranks)


def aggregate(results: list[RankResult], keep_ranks: bool = True) -> EvalReport:
    overall = Metrics.from_ranks(x.rank for x in results)
    directions = {d: Metrics.from_ranks(x.rank for x in results if x.direction == d) for d in DIRECTIONS}
    categories, cat_counts, cat_avg = {}, {}, {}
    for c in CATEGORIES:
        categories[c] = {
            d: Metrics.from_ranks(x.rank for x in results if x.category == c and x.direction == d) for d in DIRECTIONS
        }
        cat_counts[c] = categories[c]["tail"].count
        pooled = Metrics.from_ranks(x.rank for x in results if x.category == c)
        head, tail = categories[c]["head"], categories[c]["tail"]
        macro = (head.hits[10] + tail.hits[10]) / 2 if head.count and tail.count else 0.0
        cat_avg[c] = {"micro": pooled.hits[10], "macro": macro}
    return EvalReport(overall, directions, categories, cat_counts, cat_avg, results if keep_ranks else [])


# ---------------------------------------------------------------------------
# rendering


def _fmt(x: float) -> str:
    return f"{x:.3f}".lstrip("0") if x < 1 else f"{x:.3f}"


def render_text(report: EvalReport, name: str = "model") -> str:
    """Tables laid out like the usual link-prediction results tables."""
    lines = []
    header = f"{'Model':<12}| {'MRR':>5} | {'H1':>5} | {'H3':>5} | {'H10':>5}"
    lines.append(header)
    lines.append("-" * len(header))
    o = report.overall
    lines.append(f"{name:<12}| {_fmt(o.mrr):>5} | {_fmt(o.hits[1]):>5} | {_fmt(o.hits[3]):>5} | {_fmt(o.hits[10]):>5}")
    lines.append("")
    lines.append(f"{'Direction':<12}| {'MRR':>5} | {'H1':>5} | {'H3':>5} | {'H10':>5} | {'Num.':>6}")
    for d in DIRECTIONS:
        m = report.directions[d]
        lines.append(
            f"{d:<12}| {_fmt(m.mrr):>5} | {_fmt(m.hits[1]):>5} | {_fmt(m.hits[3]):>5} | {_fmt(m.hits[10]):>5} | {m.count:>6}"
        )
    lines.append("")
    lines.append(f"{'Type':<12}| {'Num.':>6} | {'H':>5} | {'T':>5} | {'A':>5} | {'A(macro)':>8}")
    for c in CATEGORIES:
        cat = report.categories[c]
        lines.append(
            f"{c:<12}| {report.category_counts[c]:>6} | {_fmt(cat['head'].hits[10]):>5} | "
            f"{_fmt(cat['tail'].hits[10]):>5} | {_fmt(report.category_average[c]['micro']):>5} | "
            f"{_fmt(report.category_average[c]['macro']):>8}"
        )
    return "\n".join(lines)


def render_structured(report: EvalReport) -> str:
    """One ``key<TAB>value`` line per metric, values as JSON numbers."""
    return "".join(f"{k}\t{json.dumps(v)}\n" for k, v in report.to_dict().items())


def parse_structured(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, value = line.split("\t", 1)
            out[key] = json.loads(value)
    return out


def report_render(report: EvalReport, fmt: str = "text", name: str = "model") -> str:
    if fmt == "text":
        return render_text(report, name)
    if fmt == "structured":
        return render_structured(report)
    raise ValueError("format must be 'text' or 'structured'")
