import os

import numpy as np
import pytest

from gcote.data import ContextIndex, FilterIndex, TripleStore
from gcote.ote import ModelConfig, OTEModel

# criterion number -> (verdict, message); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, msg = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {verdict} - {msg}")


def gs_oracle(M):
    """Textbook Gram-Schmidt recurrence, one column at a time in plain Python loops."""
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[0]
    cols = []
    for k in range(n):
        t = [M[i, k] for i in range(n)]
        for q in cols:
            dot = sum(q[i] * M[i, k] for i in range(n))
            t = [t[i] - dot * q[i] for i in range(n)]
        norm = sum(x * x for x in t) ** 0.5
        cols.append([x / norm for x in t])
    return np.array(cols).T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def toy_model(variant="OTE", n_ent=10, n_rel=3, dim=8, sub_dim=4, seed=0, dtype=np.float64, scale_noise=0.3):
    ds = 2 if variant == "RotatE" else sub_dim
    cfg = ModelConfig(n_ent, n_rel, dim, ds, variant)
    gen = np.random.default_rng(seed)
    model = OTEModel.random(cfg, gen, gamma=6.0, dtype=dtype)
    if "rel_scale" in model.params and scale_noise:
        model.params["rel_scale"][:] = gen.normal(0, scale_noise, model.params["rel_scale"].shape)
    return model


def random_store(n_ent, n_rel, n, seed=0, split="train"):
    gen = np.random.default_rng(seed)
    arr = np.stack([gen.integers(0, n_ent, n), gen.integers(0, n_rel, n), gen.integers(0, n_ent, n)], axis=1)
    return TripleStore(split, np.unique(arr, axis=0))


@pytest.fixture
def toy_graph():
    train = random_store(10, 3, 25, seed=3)
    return train, ContextIndex(train, 10), FilterIndex([train])


def write_toy_dataset(path, n_ent=30, n_rel=3, n=200, seed=0):
    gen = np.random.default_rng(seed)
    ents = [f"ent_{i}" for i in range(n_ent)]
    rels = [f"rel_{i}" for i in range(n_rel)]
    triples = set()
    while len(triples) < n:
        triples.add((ents[gen.integers(n_ent)], rels[gen.integers(n_rel)], ents[gen.integers(n_ent)]))
    triples = sorted(triples)
    gen.shuffle(triples)
    cut1, cut2 = int(0.8 * n), int(0.9 * n)
    os.makedirs(path, exist_ok=True)
    for name, part in (("train", triples[:cut1]), ("valid", triples[cut1:cut2]), ("test", triples[cut2:])):
        with open(os.path.join(path, f"{name}.txt"), "w") as f:
            f.writelines("\t".join(t) + "\n" for t in part)
    return path


@pytest.fixture
def toy_dir(tmp_path):
    return write_toy_dataset(str(tmp_path / "toy"))
