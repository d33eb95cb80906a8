"""Triple files, vocabularies and the graph indices built from them.

Triple files use the usual benchmark layout: one ``head<TAB>relation<TAB>tail``
triple per line, UTF-8. A dataset directory holds ``train.txt``,
``valid.txt`` and ``test.txt``.
"""

from __future__ import annotations

import hashlib
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
CATEGORIES = ("1-to-N", "N-to-1", "N-to-N", "other")


class TripleParseError(ValueError):
    """A triple file line does not have exactly three fields."""

    def __init__(self, path: str, lineno: int, line: str):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: expected 3 tab-separated fields, got {line!r}")


class VocabularyError(KeyError):
    """A name is missing from a fixed vocabulary."""

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int

    def __iter__(self) -> Iterator[int]:
        return iter((self.head, self.relation, self.tail))


class _Names:
    """Dense bijection between names and ids in first-appearance order."""

    def __init__(self, names: Iterable[str] = ()):
        self._names: list[str] = []
        self._ids: dict[str, int] = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        idx = self._ids.get(name)
        if idx is None:
            idx = len(self._names)
            self._ids[name] = idx
            self._names.append(name)
        return idx

    def id(self, name: str) -> int:
        return self._ids[name]

    def name(self, idx: int) -> str:
        return self._names[idx]

    def __contains__(self, name: str) -> bool:
        return name in self._ids

    def __len__(self) -> int:
        return len(self._names)

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def digest(self) -> int:
        """64-bit hash of the ordered name list."""
        h = hashlib.blake2b(digest_size=8)
        for name in self._names:
            h.update(name.encode("utf-8"))
            h.update(b"\n")
        return int.from_bytes(h.digest(), "little")


class Vocabulary:
    """Entity and relation name tables."""

    def __init__(self, entities: Iterable[str] = (), relations: Iterable[str] = ()):
        self.entities = _Names(entities)
        self.relations = _Names(relations)

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def add_triple(self, head: str, relation: str, tail: str) -> Triple:
        return Triple(self.entities.add(head), self.relations.add(relation), self.entities.add(tail))

    def encode(self, head: str, relation: str, tail: str) -> Triple:
        try:
            return Triple(self.entities.id(head), self.relations.id(relation), self.entities.id(tail))
        except KeyError as exc:
            raise VocabularyError(f"unknown name {exc.args[0]!r}") from None

    def decode(self, triple: Triple) -> tuple[str, str, str]:
        return (
            self.entities.name(triple.head),
            self.relations.name(triple.relation),
            self.entities.name(triple.tail),
        )

    def hashes(self) -> tuple[int, int]:
        return self.entities.digest(), self.relations.digest()

    def dump(self, out_dir: str) -> tuple[str, str]:
        """Write ``entities.dict`` and ``relations.dict`` (``id<TAB>name``)."""
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for fname, names in (("entities.dict", self.entities), ("relations.dict", self.relations)):
            path = os.path.join(out_dir, fname)
            with open(path, "w", encoding="utf-8") as f:
                for i, name in enumerate(names):
                    f.write(f"{i}\t{name}\n")
            paths.append(path)
        return paths[0], paths[1]

    @classmethod
    def load(cls, out_dir: str) -> "Vocabulary":
        tables = []
        for fname in ("entities.dict", "relations.dict"):
            names = []
            with open(os.path.join(out_dir, fname), encoding="utf-8") as f:
                for i, line in enumerate(f):
                    idx, name = line.rstrip("\n").split("\t", 1)
                    if int(idx) != i:
                        raise ValueError(f"{fname}: ids must be dense and ordered (line {i + 1})")
                    names.append(name)
            tables.append(names)
        return cls(tables[0], tables[1])


@dataclass
class TripleStore:
    """Triples of one split, in file order, as an ``(n, 3)`` int64 array."""

    split: str
    array: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.array = np.asarray(self.array, dtype=np.int64).reshape(-1, 3)

    @classmethod
    def from_triples(cls, split: str, triples: Iterable[Sequence[int]]) -> "TripleStore":
        return cls(split, np.array([tuple(t) for t in triples], dtype=np.int64).reshape(-1, 3))

    def __len__(self) -> int:
        return len(self.array)

    def __iter__(self) -> Iterator[Triple]:
        for h, r, t in self.array.tolist():
            yield Triple(h, r, t)

    def __getitem__(self, i: int) -> Triple:
        h, r, t = self.array[i].tolist()
        return Triple(h, r, t)

    @property
    def heads(self) -> np.ndarray:
        return self.array[:, 0]

    @property
    def relations(self) -> np.ndarray:
        return self.array[:, 1]

    @property
    def tails(self) -> np.ndarray:
        return self.array[:, 2]


def read_raw_triples(path: str) -> list[tuple[str, str, str]]:
    """Parse a triple file into name triples, skipping blank lines."""
    raw = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            fields = line.rstrip("\r\n").split("\t")
            if len(fields) != 3:
                raise TripleParseError(path, lineno, line.rstrip("\r\n"))
            raw.append((fields[0].strip(), fields[1].strip(), fields[2].strip()))
    return raw


def _warn_duplicates(path: str, raw: Sequence[tuple[str, str, str]]) -> None:
    dupes = len(raw) - len(set(raw))
    if dupes:
        logger.warning("%s: %d duplicate triple lines kept", path, dupes)


def load_triples(path: str, vocab: Vocabulary, split: str = "train", grow: bool = False) -> TripleStore:
    """Load a triple file against ``vocab``.

    With ``grow=True`` unseen names are appended to the vocabulary; otherwise
    they raise :class:`VocabularyError`.
    """
    raw = read_raw_triples(path)
    _warn_duplicates(path, raw)
    encode = vocab.add_triple if grow else vocab.encode
    return TripleStore.from_triples(split, (tuple(encode(*names)) for names in raw))


def build_vocab(splits: Iterable[Iterable[tuple[str, str, str]]]) -> Vocabulary:
    """Vocabulary over name triples, ids in first-appearance order."""
    vocab = Vocabulary()
    for raw in splits:
        for h, r, t in raw:
            vocab.add_triple(h, r, t)
    return vocab


@dataclass
class Dataset:
    vocab: Vocabulary
    train: TripleStore
    valid: TripleStore
    test: TripleStore

    @property
    def splits(self) -> dict[str, TripleStore]:
        return {"train": self.train, "valid": self.valid, "test": self.test}

    def statistics(self) -> dict[str, int]:
        return {
            "entities": self.vocab.num_entities,
            "relations": self.vocab.num_relations,
            "train": len(self.train),
            "valid": len(self.valid),
            "test": len(self.test),
        }


def load_dataset(data_dir: str, vocab: Vocabulary | None = None) -> Dataset:
    """Read ``train.txt``, ``valid.txt`` and ``test.txt`` from ``data_dir``.

    Without ``vocab`` one is built in first-appearance order over
    train, valid, test.
    """
    paths = {}
    for split in SPLITS:
        path = os.path.join(data_dir, f"{split}.txt")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing split file {path}")
        paths[split] = path
    raws = {split: read_raw_triples(path) for split, path in paths.items()}
    if vocab is None:
        vocab = build_vocab(raws[s] for s in SPLITS)
    stores = {}
    for split in SPLITS:
        _warn_duplicates(paths[split], raws[split])
        stores[split] = TripleStore.from_triples(split, (tuple(vocab.encode(*names)) for names in raws[split]))
    return Dataset(vocab, stores["train"], stores["valid"], stores["test"])


class _Adjacency:
    """CSR lists of ``(a, b)`` pairs keyed by entity.

    The incoming side stores ``(head, relation)`` pairs, the outgoing side
    ``(relation, tail)`` pairs.
    """

    def __init__(self, side: str, key: np.ndarray, a: np.ndarray, b: np.ndarray, num_entities: int):
        self.side = side
        order = np.argsort(key, kind="stable")
        self.a = a[order]
        self.b = b[order]
        counts = np.bincount(key, minlength=num_entities)
        self.offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def degree(self, entity=None):
        deg = np.diff(self.offsets)
        return deg if entity is None else deg[entity]

    def pairs(self, entity: int) -> list[tuple[int, int]]:
        lo, hi = self.offsets[entity], self.offsets[entity + 1]
        return list(zip(self.a[lo:hi].tolist(), self.b[lo:hi].tolist()))

    def gather(self, entities: np.ndarray, cap: int | None = None, rng: np.random.Generator | None = None):
        """Flatten the neighbor lists of ``entities``.

        Returns ``(segment, a, b, counts)`` where ``segment[j]`` is the position
        in ``entities`` that pair ``j`` belongs to. Lists longer than ``cap``
        are replaced by a uniform sample of ``cap`` pairs without replacement.
        """
        entities = np.asarray(entities, dtype=np.int64)
        starts = self.offsets[entities]
        deg = self.offsets[entities + 1] - starts
        counts = deg if cap is None else np.minimum(deg, cap)
        seg = np.repeat(np.arange(len(entities)), counts)
        within = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        if cap is not None:
            hubs = np.flatnonzero(deg > cap)
            if len(hubs):
                if rng is None:
                    raise ValueError("a generator is required when sampling capped neighborhoods")
                seg_start = np.cumsum(counts) - counts
                for i in hubs:
                    pick = np.sort(rng.choice(deg[i], size=cap, replace=False))
                    within[seg_start[i] : seg_start[i] + cap] = pick
        idx = np.repeat(starts, counts) + within
        return seg, self.a[idx], self.b[idx], counts


class ContextIndex:
    """Directed neighborhoods from the training split.

    ``head_rel_pairs(e)`` lists the ``(h', r')`` of training triples with tail
    ``e``; ``rel_tail_pairs(e)`` lists the ``(r', t')`` of triples with head
    ``e``. Duplicate triples appear once per occurrence.
    """

    def __init__(self, train: TripleStore, num_entities: int):
        h, r, t = train.heads, train.relations, train.tails
        self.num_entities = num_entities
        self.incoming = _Adjacency("incoming", t, h, r, num_entities)
        self.outgoing = _Adjacency("outgoing", h, r, t, num_entities)

    def head_rel_pairs(self, entity: int) -> list[tuple[int, int]]:
        return self.incoming.pairs(entity)

    def rel_tail_pairs(self, entity: int) -> list[tuple[int, int]]:
        return self.outgoing.pairs(entity)

    def in_degree(self, entity=None):
        return self.incoming.degree(entity)

    def out_degree(self, entity=None):
        return self.outgoing.degree(entity)

    def average_degree(self) -> float:
        """Mean total (in + out) degree per entity."""
        if self.num_entities == 0:
            return 0.0
        return float((self.in_degree() + self.out_degree()).mean())


def build_context_index(train: TripleStore, num_entities: int) -> ContextIndex:
    return ContextIndex(train, num_entities)


class FilterIndex:
    """All known true triples, queryable from either side."""

    def __init__(self, stores: Iterable[TripleStore]):
        self.tails: dict[tuple[int, int], set[int]] = {}
        self.heads: dict[tuple[int, int], set[int]] = {}
        self._triples: set[tuple[int, int, int]] = set()
        for store in stores:
            for h, r, t in store.array.tolist():
                self._triples.add((h, r, t))
                self.tails.setdefault((h, r), set()).add(t)
                self.heads.setdefault((r, t), set()).add(h)

    def __contains__(self, triple) -> bool:
        return tuple(triple) in self._triples

    def __len__(self) -> int:
        return len(self._triples)

    def true_tails(self, head: int, relation: int) -> set[int]:
        return self.tails.get((head, relation), set())

    def true_heads(self, relation: int, tail: int) -> set[int]:
        return self.heads.get((relation, tail), set())


def build_filter_index(stores: Iterable[TripleStore]) -> FilterIndex:
    return FilterIndex(stores)


class PairCounts:
    """Training-split counts of ``(h, r)`` and ``(r, t)`` pairs; absent pairs count 0."""

    def __init__(self, train: TripleStore):
        arr = train.array.tolist()
        self.head_rel = Counter((h, r) for h, r, _ in arr)
        self.rel_tail = Counter((r, t) for _, r, t in arr)

    def hr(self, head: int, relation: int) -> int:
        return self.head_rel.get((head, relation), 0)

    def rt(self, relation: int, tail: int) -> int:
        return self.rel_tail.get((relation, tail), 0)


def classify_counts(c_hr: int, c_rt: int) -> str:
    if c_hr > 1 and c_rt <= 1:
        return "N-to-1"
    if c_hr <= 1 and c_rt > 1:
        return "1-to-N"
    if c_hr > 1 and c_rt > 1:
        return "N-to-N"
    return "other"


def classify_triple(triple, counts: PairCounts) -> str:
    h, r, t = triple
    return classify_counts(counts.hr(h, r), counts.rt(r, t))


def category_counts(store: TripleStore, counts: PairCounts) -> dict[str, int]:
    tally = Counter(classify_triple(t, counts) for t in store.array.tolist())
    return {c: tally.get(c, 0) for c in CATEGORIES}
