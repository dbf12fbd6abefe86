"""Two-stage temporal knowledge-graph forecasting.

Stage 1 searches time-constrained relation-entity clue paths with a
policy-gradient-trained randomized beam search; stage 2 re-ranks the
resulting candidates with a relation-aware GCN over per-timestep clue
graphs followed by a GRU and an entity decoder.
"""

from .autodiff import GradCheckReport, Tape, Tensor, grad_check
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .evaluation import evaluate, explain, final_ranking, metrics
from .kernels import BACKEND as KERNEL_BACKEND
from .stage1 import Query, Stage1Params, randomized_beam_search, stage1_rank
from .stage2 import Stage2Params, build_sequence, derive_clue_facts
from .synth import SynthConfig, generate_synthetic
from .tkg import (
    DatasetBundle,
    Quadruple,
    RelationVocab,
    TemporalKG,
    augment_inverse,
    coverage_stats,
    load_dataset,
)
from .training import TrainConfig, pretrain_stage1, train_joint, train_stage2_frozen

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "DatasetBundle",
    "GradCheckReport",
    "KERNEL_BACKEND",
    "Quadruple",
    "Query",
    "RelationVocab",
    "Stage1Params",
    "Stage2Params",
    "SynthConfig",
    "Tape",
    "TemporalKG",
    "Tensor",
    "TrainConfig",
    "augment_inverse",
    "build_sequence",
    "coverage_stats",
    "derive_clue_facts",
    "evaluate",
    "explain",
    "final_ranking",
    "generate_synthetic",
    "grad_check",
    "load_checkpoint",
    "load_dataset",
    "metrics",
    "pretrain_stage1",
    "randomized_beam_search",
    "save_checkpoint",
    "stage1_rank",
    "train_joint",
    "train_stage2_frozen",
]
