"""``gcote`` command line: prepare, train, finetune, eval, verify.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 5 invariant or expectation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields

from .checkpoint import (
    Checkpoint,
    CheckpointError,
    ConfigMismatchError,
    VocabularyMismatchError,
    check_compatible,
    inspect_header,
    load_checkpoint,
    save_checkpoint,
)
from .config import ConfigError, RunConfig, load_config, parse_value
from .data import (
    CATEGORIES,
    ContextIndex,
    Dataset,
    FilterIndex,
    PairCounts,
    TripleParseError,
    VocabularyError,
    category_counts,
    load_dataset,
)
from .evaluate import ModelScorer, evaluate, render_structured, report_render
from .ote import DegenerateMatrixError, ModelConfig, OTEModel
from .train import AdamState, TrainData, TrainingDivergedError, stream, train

logger = logging.getLogger("gcote")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4, 5


class InvariantError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _load_data(cfg: RunConfig) -> Dataset:
    if not cfg.data_dir:
        raise ConfigError("data_dir is required (flag, config file or GCOTE_DATA_DIR)")
    if not os.path.isdir(cfg.data_dir):
        raise FileNotFoundError(f"data directory {cfg.data_dir} does not exist")
    return load_dataset(cfg.data_dir)


def _out_path(cfg: RunConfig, name: str) -> str:
    out_dir = cfg.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


def _threads(cfg: RunConfig):
    from threadpoolctl import threadpool_limits

    limit = 1 if cfg.deterministic else cfg.threads
    return threadpool_limits(limits=limit) if limit else threadpool_limits(limits=None)


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: RunConfig, expect: str | None = None) -> int:
    ds = _load_data(cfg)
    stats = ds.statistics()
    counts = PairCounts(ds.train)
    cats = category_counts(ds.valid, counts)
    out_dir = cfg.out_dir or "."
    ds.vocab.dump(out_dir)
    report = {"statistics": stats, "valid_categories": cats}
    with open(os.path.join(out_dir, "statistics.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2)
    print(f"{'entities':<12}{stats['entities']:>10}")
    print(f"{'relations':<12}{stats['relations']:>10}")
    for split in ("train", "valid", "test"):
        print(f"{split:<12}{stats[split]:>10}")
    print("valid categories: " + ", ".join(f"{c}={cats[c]}" for c in CATEGORIES))
    if expect:
        wanted = {}
        with open(expect, encoding="utf-8") as f:
            for line in f:
                line = line.split("#", 1)[0].strip()
                if line:
                    key, value = (x.strip() for x in line.split("=", 1))
                    wanted[key] = int(value)
        found = {**stats, **{f"valid.{c}": n for c, n in cats.items()}}
        diffs = [f"{k}: expected {v}, found {found.get(k)}" for k, v in wanted.items() if found.get(k) != v]
        if diffs:
            raise InvariantError("statistics mismatch: " + "; ".join(diffs))
        print(f"all {len(wanted)} expected counts match")
    return EXIT_OK


def last_path(path: str) -> str:
    stem = path[: -len(".ckpt")] if path.endswith(".ckpt") else path
    return f"{stem}.last.ckpt"


def _train_stage(cfg: RunConfig, stage: str) -> int:
    cfg.stage = stage
    ds = _load_data(cfg)
    vocab_hashes = ds.vocab.hashes()
    mcfg = cfg.model_config(ds.vocab.num_entities, ds.vocab.num_relations)
    tcfg = cfg.train_config()
    start_step, state = 0, None
    if cfg.init_checkpoint:
        header = inspect_header(cfg.init_checkpoint)
        check_compatible(header, mcfg)
        ckpt = load_checkpoint(cfg.init_checkpoint, ds.vocab)
        model = ckpt.model.astype(cfg.dtype)
        if ckpt.stage == stage:
            # resume the same stage
            start_step, state = ckpt.step, ckpt.optimizer
        elif not (ckpt.stage == "pretrain" and stage == "finetune"):
            raise ConfigMismatchError(f"cannot run {stage} from a {ckpt.stage} checkpoint")
    elif stage == "finetune":
        raise ConfigError("finetune needs a pretrained checkpoint (--init-checkpoint)")
    else:
        model = OTEModel.random(mcfg, stream(cfg.seed, "init"), gamma=cfg.gamma, dtype=cfg.dtype)
    data = TrainData(ds.train, ds.valid, FilterIndex([ds.train, ds.valid, ds.test]), ContextIndex(ds.train, mcfg.num_entities))
    result = train(model, data, tcfg, state=state, start_step=start_step, on_log=print)
    path = cfg.checkpoint or _out_path(cfg, f"{stage}.ckpt")
    meta = {"best_step": result.best_step, "best_valid_mrr": result.best_mrr, "train_config": tcfg.as_dict()}
    # the selected model goes to ``path``; the exact final state (for resuming) to ``last``
    last = last_path(path)
    save_checkpoint(Checkpoint(model, result.optimizer, stage, result.step, vocab_hashes, meta), last)
    if result.best_step == result.step:
        best = Checkpoint(model, result.optimizer, stage, result.step, vocab_hashes, meta)
    else:
        best = Checkpoint(result.model, AdamState(), stage, result.best_step, vocab_hashes, meta)
    save_checkpoint(best, path)
    cfg.save(f"{path}.cfg")
    print(f"wrote {path} (stage={stage}, step={best.step}) and {last} (step={result.step})")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    return _train_stage(cfg, "pretrain")


def cmd_finetune(cfg: RunConfig) -> int:
    return _train_stage(cfg, "finetune")


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    ds = _load_data(cfg)
    ckpt = load_checkpoint(cfg.checkpoint, ds.vocab)
    context = ContextIndex(ds.train, ds.vocab.num_entities) if ckpt.stage == "finetune" else None
    scorer = ModelScorer(ckpt.model, context)
    filt = FilterIndex([ds.train, ds.valid, ds.test])
    split = ds.splits[cfg.split]
    if cfg.valid_limit is not None:
        split = type(split)(split.split, split.array[: cfg.valid_limit])
    report = evaluate(split, scorer, filt, PairCounts(ds.train))
    name = ("GC-" if ckpt.stage == "finetune" else "") + ckpt.model.cfg.variant
    print(report_render(report, cfg.format, name), end="" if cfg.format == "structured" else "\n")
    if cfg.report:
        with open(cfg.report, "w", encoding="utf-8") as f:
            f.write(render_structured(report))
    return EXIT_OK


def cmd_verify(cfg: RunConfig, patterns: dict, num_entities: int, num_relations: int) -> int:
    from .verify import run_suite

    if cfg.checkpoint:
        ckpt = load_checkpoint(cfg.checkpoint)
        model = ckpt.model.astype(cfg.dtype)
        names = None
        if cfg.data_dir:
            names = _load_data(cfg).vocab.relations
    else:
        mcfg = ModelConfig(num_entities, num_relations, cfg.dim, cfg.sub_dim, cfg.variant)
        model = OTEModel.random(mcfg, stream(cfg.seed, "init"), gamma=cfg.gamma, dtype=cfg.dtype)
        names = None

    def rel_id(x: str) -> int:
        if x.isdigit():
            return int(x)
        if names is None:
            raise ConfigError(f"relation {x!r} given by name; pass --data-dir to resolve names")
        return names.id(x)

    sym = [rel_id(x) for x in patterns["symmetric"]]
    inv = [tuple(rel_id(y) for y in x.split(",")) for x in patterns["inverse"]]
    comp = [tuple(rel_id(y) for y in x.split(",")) for x in patterns["composition"]]
    if any(len(x) != 2 for x in inv) or any(len(x) != 3 for x in comp):
        raise ConfigError("--inverse takes r1,r2 and --composition takes r1,r2,r3")
    report = run_suite(model, cfg.seed, sym, inv, comp)
    print(report.render())
    if not report.passed:
        raise InvariantError("; ".join(f"{c.name}: observed {c.observed:.3g} > {c.tolerance:.3g}" for c in report.failures()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

_HELP = {
    "data_dir": "directory with train.txt, valid.txt, test.txt",
    "out_dir": "directory for artifacts",
    "checkpoint": "checkpoint to write (train/finetune) or read (eval/verify)",
    "init_checkpoint": "checkpoint to start from (resume, or pretrain for finetune)",
    "dim": "embedding dimension d",
    "sub_dim": "sub-embedding (group) size d_s; must divide dim",
    "variant": "OTE, OTE-noscale, LNE or RotatE",
    "lr": "Adam learning rate",
    "gamma": "margin",
    "alpha": "self-adversarial temperature (0 = uniform weights)",
    "n_neg": "negatives per positive and corruption side",
    "batch_size": "positives per step",
    "max_steps": "last training step (resume continues up to it)",
    "valid_interval": "steps between validation runs",
    "patience": "non-improving validations before early stop",
    "neighbor_cap": "neighbors sampled per context in training (none = all)",
    "freeze_neighbors": "no gradient into neighbor embeddings through the context",
    "det_check_interval": "steps between degenerate-matrix repairs (0 = off)",
    "log_interval": "steps between loss lines (0 = off)",
    "valid_limit": "evaluate only the first N triples of the split",
    "seed": "seed for initialisation, batches, negatives and neighbor samples",
    "precision": "32 or 64 bit reals",
    "threads": "numeric library threads (default: all cores)",
    "deterministic": "single thread, fixed reduction order",
    "split": "split to evaluate",
    "format": "text or structured",
    "report": "also write a structured report here",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gcote", description="Orthogonal transform and graph context KG embeddings")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    for f in fields(RunConfig):
        if f.name == "stage":
            continue
        flag = "--" + f.name.replace("_", "-")
        if str(f.type).startswith("bool"):
            common.add_argument(flag, dest=f.name, action="store_const", const=True, default=None, help=_HELP.get(f.name))
        else:
            common.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper(), help=_HELP.get(f.name))
    sub.add_parser("prepare", parents=[common], help="load a dataset, write vocabularies and statistics").add_argument(
        "--expect", help="key = value file of expected counts; mismatch exits with 5"
    )
    sub.add_parser("train", parents=[common], help="pretrain (or resume) a model")
    sub.add_parser("finetune", parents=[common], help="fine-tune a pretrained model with graph context")
    sub.add_parser("eval", parents=[common], help="filtered link-prediction evaluation")
    verify = sub.add_parser("verify", parents=[common], help="property suite on a checkpoint or a fresh model")
    verify.add_argument("--symmetric", action="append", default=[], help="relation expected to be symmetric")
    verify.add_argument("--inverse", action="append", default=[], help="r1,r2 expected to be inverses")
    verify.add_argument("--composition", action="append", default=[], help="r1,r2,r3 with r3 = r2 after r1")
    verify.add_argument("--num-entities", type=int, default=10, help="fresh model size")
    verify.add_argument("--num-relations", type=int, default=3, help="fresh model size")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value if isinstance(value, bool) else parse_value(f.name, value)
    return load_config(args.config, overrides)


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        with _threads(cfg):
            if args.command == "prepare":
                return cmd_prepare(cfg, args.expect)
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "finetune":
                return cmd_finetune(cfg)
            if args.command == "eval":
                return cmd_eval(cfg)
            patterns = {"symmetric": args.symmetric, "inverse": args.inverse, "composition": args.composition}
            return cmd_verify(cfg, patterns, args.num_entities, args.num_relations)
    except (ConfigError, ConfigMismatchError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (TripleParseError, VocabularyError, VocabularyMismatchError, CheckpointError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, DegenerateMatrixError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except InvariantError as err:
        print(f"invariant failure: {err}", file=sys.stderr)
        return EXIT_INVARIANT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
