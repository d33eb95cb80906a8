"""Synthetic knowledge graphs with planted relation patterns."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, TripleStore, Vocabulary


@dataclass
class PlantedKG:
    """A dataset plus which relations carry which pattern.

    ``held_out[pattern]`` lists the test triples whose answer can only be
    inferred through that pattern.
    """

    dataset: Dataset
    symmetric: list[int] = field(default_factory=list)
    inverse: list[tuple[int, int]] = field(default_factory=list)
    composition: list[tuple[int, int, int]] = field(default_factory=list)
    held_out: dict[str, np.ndarray] = field(default_factory=dict)


def planted_patterns_kg(num_entities: int = 200, holdout: float = 0.2, seed: int = 0) -> PlantedKG:
    """Five disjoint entity blocks wired by one-to-one relations.

    * ``compose_1: A -> B``, ``compose_2: B -> C`` and ``compose_3: A -> C`` with
      ``compose_3 = compose_2 . compose_1``; a share of ``compose_3`` is held out.
    * ``inverse_1: D -> E`` and ``inverse_2: E -> D``; a share of ``inverse_2``
      is held out while the matching ``inverse_1`` triple stays in training.
    * ``symmetric`` pairs entities across the whole graph, both directions;
      one direction of a share of the pairs is held out.
    """
    rng = np.random.default_rng(seed)
    block = num_entities // 5
    ids = rng.permutation(num_entities)
    A, B, C, D, E = (ids[i * block : (i + 1) * block] for i in range(5))
    rel_names = ["compose_1", "compose_2", "compose_3", "inverse_1", "inverse_2", "symmetric"]
    c1, c2, c3, i1, i2, sym = range(len(rel_names))

    def n_hold(n):
        return int(round(holdout * n))

    train, test = [], {"composition": [], "inverse": [], "symmetric": []}
    train += [(a, c1, b) for a, b in zip(A, B)]
    train += [(b, c2, c) for b, c in zip(B, C)]
    comp = [(a, c3, c) for a, c in zip(A, C)]
    k = n_hold(len(comp))
    test["composition"] += comp[:k]
    train += comp[k:]

    train += [(d, i1, e) for d, e in zip(D, E)]
    inv = [(e, i2, d) for d, e in zip(D, E)]
    k = n_hold(len(inv))
    test["inverse"] += inv[:k]
    train += inv[k:]

    matching = rng.permutation(num_entities)
    pairs = list(zip(matching[0::2], matching[1::2]))
    k = n_hold(len(pairs))
    for j, (x, y) in enumerate(pairs):
        train.append((x, sym, y))
        (test["symmetric"] if j < k else train).append((y, sym, x))

    train = np.array(train, dtype=np.int64)
    train = train[rng.permutation(len(train))]
    held_out = {p: np.array(v, dtype=np.int64).reshape(-1, 3) for p, v in test.items()}
    all_test = np.concatenate(list(held_out.values()))
    vocab = Vocabulary([f"e{i}" for i in range(num_entities)], rel_names)
    dataset = Dataset(
        vocab,
        TripleStore("train", train),
        TripleStore("valid", np.zeros((0, 3), dtype=np.int64)),
        TripleStore("test", all_test),
    )
    return PlantedKG(dataset, [sym], [(i1, i2)], [(c1, c2, c3)], held_out)


def random_kg(num_entities: int, num_relations: int, num_triples: int, seed: int = 0) -> np.ndarray:
    """Distinct uniformly random triples as an ``(n, 3)`` array."""
    rng = np.random.default_rng(seed)
    seen: set[tuple[int, int, int]] = set()
    out = []
    while len(out) < num_triples:
        tr = (int(rng.integers(num_entities)), int(rng.integers(num_relations)), int(rng.integers(num_entities)))
        if tr not in seen:
            seen.add(tr)
            out.append(tr)
    return np.array(out, dtype=np.int64).reshape(-1, 3)
