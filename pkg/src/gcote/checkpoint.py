"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        8 bytes   b"GCOTECKP"
    version      uint32    FORMAT_VERSION
    header_len   uint64
    header       header_len bytes of UTF-8 JSON
    blocks       raw little-endian reals, one block after another

The header records the model config (``d``, ``d_s``, ``K``, variant, entity
and relation counts), the stage label and step, the storage dtype, the 64-bit
vocabulary hashes, the Adam step counter, any extra metadata, and the list of
blocks as ``(name, shape)`` in file order. Block order is fixed:

1. ``entity`` (row-major ``N x d``)
2. relation blocks: ``rel_mat``, ``rel_mat_back``, ``rel_phase``, then ``rel_scale``
3. Adam first moments ``adam.m.<name>`` and second moments ``adam.v.<name>``
   in the same order

Blocks are stored in the model's own precision (``<f4`` normally, ``<f8`` in
64-bit mode) so that a round trip is bit exact.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import Vocabulary
from .ote import ModelConfig, OTEModel
from .train import AdamState

MAGIC = b"GCOTECKP"
FORMAT_VERSION = 1
PARAM_ORDER = ("entity", "rel_mat", "rel_mat_back", "rel_phase", "rel_scale")
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    """Malformed, truncated or unsupported checkpoint file."""


class VocabularyMismatchError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: OTEModel
    optimizer: AdamState = field(default_factory=AdamState)
    stage: str = "pretrain"
    step: int = 0
    vocab_hashes: tuple[int, int] = (0, 0)
    meta: dict = field(default_factory=dict)


def _ordered(names) -> list[str]:
    return [n for n in PARAM_ORDER if n in names]


def _header(ckpt: Checkpoint, dtype: np.dtype) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    cfg = ckpt.model.cfg
    blocks = [(n, ckpt.model.params[n]) for n in _ordered(ckpt.model.params)]
    opt = ckpt.optimizer
    for kind, moments in (("m", opt.m), ("v", opt.v)):
        blocks += [(f"adam.{kind}.{n}", moments[n]) for n in _ordered(moments)]
    header = {
        "config": {
            "dim": cfg.dim,
            "sub_dim": cfg.sub_dim,
            "num_groups": cfg.num_groups,
            "variant": cfg.variant,
            "num_entities": cfg.num_entities,
            "num_relations": cfg.num_relations,
        },
        "stage": ckpt.stage,
        "step": int(ckpt.step),
        "dtype": dtype.str,
        "vocab_hashes": {"entities": f"{ckpt.vocab_hashes[0]:016x}", "relations": f"{ckpt.vocab_hashes[1]:016x}"},
        "adam_t": int(opt.t),
        "meta": ckpt.meta,
        "blocks": [[name, list(arr.shape)] for name, arr in blocks],
    }
    return header, blocks


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    """Write ``ckpt`` atomically (temporary file then rename)."""
    dtype = np.dtype(ckpt.model.dtype).newbyteorder("<")
    header, blocks = _header(ckpt, dtype)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(raw)))
        f.write(raw)
        for _, arr in blocks:
            f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    os.replace(tmp, path)


def _read_prefix(f) -> dict:
    prefix = f.read(_PREFIX.size)
    if len(prefix) < _PREFIX.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, n = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}; not a checkpoint")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    raw = f.read(n)
    if len(raw) < n:
        raise CheckpointError("truncated checkpoint header")
    try:
        return json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint header: {err}") from err


def inspect_header(path: str) -> dict:
    """Header fields only, without reading any parameter block."""
    with open(path, "rb") as f:
        return _read_prefix(f)


def _check_vocab(header: dict, vocab: Vocabulary | tuple[int, int] | None) -> None:
    if vocab is None:
        return
    hashes = vocab.hashes() if isinstance(vocab, Vocabulary) else vocab
    stored = header["vocab_hashes"]
    found = (int(stored["entities"], 16), int(stored["relations"], 16))
    if tuple(hashes) != found:
        raise VocabularyMismatchError(
            f"vocabulary hash mismatch: checkpoint has entities={stored['entities']} "
            f"relations={stored['relations']}, data has entities={hashes[0]:016x} relations={hashes[1]:016x}"
        )


def load_checkpoint(path: str, vocab: Vocabulary | tuple[int, int] | None = None) -> Checkpoint:
    """Read a checkpoint, refusing it if ``vocab`` hashes differ from the stored ones."""
    with open(path, "rb") as f:
        header = _read_prefix(f)
        _check_vocab(header, vocab)
        dtype = np.dtype(header["dtype"])
        arrays = {}
        for name, shape in header["blocks"]:
            count = int(np.prod(shape, dtype=np.int64))
            data = f.read(count * dtype.itemsize)
            if len(data) < count * dtype.itemsize:
                raise CheckpointError(f"truncated checkpoint: block {name!r} is incomplete")
            arrays[name] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        if f.read(1):
            raise CheckpointError("trailing bytes after the last block")
    c = header["config"]
    cfg = ModelConfig(c["num_entities"], c["num_relations"], c["dim"], c["sub_dim"], c["variant"])
    params = {n: a for n, a in arrays.items() if not n.startswith("adam.")}
    try:
        model = OTEModel(cfg, params)
    except ValueError as err:
        raise CheckpointError(f"checkpoint blocks do not match its config: {err}") from err
    opt = AdamState(
        {n[len("adam.m.") :]: a for n, a in arrays.items() if n.startswith("adam.m.")},
        {n[len("adam.v.") :]: a for n, a in arrays.items() if n.startswith("adam.v.")},
        header["adam_t"],
    )
    hashes = (int(header["vocab_hashes"]["entities"], 16), int(header["vocab_hashes"]["relations"], 16))
    return Checkpoint(model, opt, header["stage"], header["step"], hashes, header.get("meta", {}))


def check_compatible(header: dict, cfg: ModelConfig) -> None:
    """Raise :class:`ConfigMismatchError` if ``header`` disagrees with ``cfg`` on d, d_s or variant."""
    c = header["config"]
    diffs = [
        f"{key}: checkpoint {c[key]} vs config {getattr(cfg, key)}"
        for key in ("dim", "sub_dim", "variant", "num_entities", "num_relations")
        if c[key] != getattr(cfg, key)
    ]
    if diffs:
        raise ConfigMismatchError("incompatible checkpoint; " + "; ".join(diffs))
