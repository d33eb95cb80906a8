"""Orthogonal transform embeddings with graph context for link prediction."""

from .checkpoint import Checkpoint, inspect_header, load_checkpoint, save_checkpoint
from .data import (
    ContextIndex,
    Dataset,
    FilterIndex,
    PairCounts,
    TripleStore,
    Vocabulary,
    build_context_index,
    build_filter_index,
    build_vocab,
    classify_triple,
    load_dataset,
    load_triples,
)
from .evaluate import ModelScorer, evaluate, rank_triple, report_render
from .numeric import check_gradients, l2_norm, matvec
from .ote import (
    ModelConfig,
    OTEModel,
    distance_backward,
    distance_forward,
    gram_schmidt,
    init_relation,
    project_backward,
    project_forward,
    verify_composition,
    verify_inverse,
    verify_symmetry,
)
from .context import (
    context_repr_head,
    context_repr_tail,
    distance_context_head,
    distance_context_tail,
    refresh_context_cache,
    score_all,
)
from .train import TrainConfig, adam_step, adversarial_weights, loss, sample_negatives, train

__all__ = [
    "Checkpoint",
    "ContextIndex",
    "Dataset",
    "FilterIndex",
    "ModelConfig",
    "ModelScorer",
    "OTEModel",
    "PairCounts",
    "TrainConfig",
    "TripleStore",
    "Vocabulary",
    "adam_step",
    "adversarial_weights",
    "build_context_index",
    "build_filter_index",
    "build_vocab",
    "check_gradients",
    "classify_triple",
    "context_repr_head",
    "context_repr_tail",
    "distance_backward",
    "distance_context_head",
    "distance_context_tail",
    "distance_forward",
    "evaluate",
    "gram_schmidt",
    "init_relation",
    "inspect_header",
    "l2_norm",
    "load_checkpoint",
    "load_dataset",
    "load_triples",
    "loss",
    "matvec",
    "project_backward",
    "project_forward",
    "rank_triple",
    "refresh_context_cache",
    "report_render",
    "sample_negatives",
    "save_checkpoint",
    "score_all",
    "train",
    "verify_composition",
    "verify_inverse",
    "verify_symmetry",
]

__version__ = "0.1.0"
