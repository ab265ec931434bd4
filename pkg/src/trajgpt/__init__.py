"""Desk-scale workbench for cross-modal transfer: pre-train a causal
transformer on offline-RL trajectories or text, transplant the shared
backbone, fine-tune on sentence classification, and ablate trajectory
structure by shuffling. Everything runs on a hand-written float64 autodiff
engine and is bit-reproducible per seed.
"""

from .backbone import (
    BackboneConfig,
    BackboneWeights,
    ContextOverflowError,
    backbone_forward,
    backbone_param_names,
    expected_param_count,
    init_backbone,
)
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from .datagen import (
    MazeSpec,
    SyntheticEnvironment,
    Trajectory,
    collect_expert,
    collect_medium_replay,
    collect_random,
    load_trajectories,
    markov_diagnostic,
    maze_controller_env_and_collect,
    mean_return,
    pointmass_env,
    save_trajectories,
)
from .dt import (
    DTBatch,
    DTTrainConfig,
    dt_forward,
    dt_loss,
    init_dt_head,
    returns_to_go,
    sample_window,
    stack_windows,
    train_dt,
)
from .lm import (
    LMTrainConfig,
    Vocabulary,
    build_vocab,
    chunk_corpus,
    lm_forward,
    lm_loss,
    load_vocab,
    perplexity,
    save_vocab,
    train_lm,
    unigram_perplexity,
)
from .shuffle import ShuffleSpec, apply_shuffle, batch_augmenter, materialize_tokens
from .tensor import Tensor, TapeError
from .transfer import (
    FinetuneConfig,
    MetricsReport,
    NLUExample,
    aggregate_report,
    attach_task_model,
    encode_example,
    extract_backbone,
    finetune,
    load_task_file,
    make_random_checkpoint,
    task_forward,
    task_predict,
)

__version__ = "0.1.0"
