"""Backbone transplant onto sentence-classification tasks.

A checkpoint from any training route (trajectory model, language model, or a
fresh random init) donates its transformer blocks. Everything task-specific
is created fresh from the fine-tuning seed: token embeddings, learned
position embeddings, and the classification matrix. Two task models built
from different checkpoints with the same seed therefore differ in nothing
but the backbone weights, which is exactly the comparison the workbench is
built to make.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .backbone import (
    INIT_STD,
    BackboneConfig,
    BackboneWeights,
    ContextOverflowError,
    backbone_forward,
    backbone_param_names,
    init_backbone,
)
from .checkpoint import Checkpoint
from .lm import PAD_ID, SEP_ID, Vocabulary, build_vocab, encode
from .optim import AdamState, adam_step, clip_global_norm
from .tensor import Tensor, add, cross_entropy, embedding_lookup, matmul, parameter, reshape, take_rows

GRAD_CLIP = 1.0

TASK_PARAM_NAMES = (
    "task.cls.w",
    "task.position_embedding.table",
    "task.token_embedding.table",
)


def extract_backbone(ckpt: Checkpoint) -> Checkpoint:
    """Strip a trajectory-model checkpoint down to its transformer blocks.

    Keeps exactly the backbone tensors (attention/MLP blocks and the final
    layernorm), bit for bit; the modality embedders and the action head do
    not survive. Idempotent: extracting an already-extracted checkpoint is a
    no-op apart from copying.
    """
    if ckpt.provenance != "rl-pretrained":
        raise ValueError(f"can only extract from an rl-pretrained checkpoint, got {ckpt.provenance!r}")
    needed = backbone_param_names(ckpt.config)
    missing = [n for n in needed if n not in ckpt.params]
    if missing:
        raise ValueError(f"checkpoint is missing backbone tensors: {', '.join(missing)}")
    meta = {"backbone_only": "true"}
    if "env_name" in ckpt.meta:
        meta["env_name"] = ckpt.meta["env_name"]
    source_seed = ckpt.meta.get("source_seed", ckpt.meta.get("seed"))
    if source_seed is not None:
        meta["source_seed"] = source_seed
    return Checkpoint(
        params={n: ckpt.params[n].copy() for n in needed},
        config=ckpt.config,
        provenance="rl-pretrained",
        meta=meta,
    )


def make_random_checkpoint(config: BackboneConfig, seed: int) -> Checkpoint:
    """A never-trained backbone, packaged like any other checkpoint."""
    weights = init_backbone(config, seed)
    return Checkpoint(
        params={n: weights[n].data.copy() for n in weights.names()},
        config=config,
        provenance="random",
        meta={"seed": str(seed)},
    )


def _backbone_from_checkpoint(ckpt: Checkpoint) -> BackboneWeights:
    needed = backbone_param_names(ckpt.config)
    missing = [n for n in needed if n not in ckpt.params]
    if missing:
        raise ValueError(f"checkpoint is missing backbone tensors: {', '.join(missing)}")
    return BackboneWeights(ckpt.config, {n: parameter(ckpt.params[n].copy()) for n in needed})


# ---------------------------------------------------------------------------
# Task data


@dataclass(frozen=True)
class NLUExample:
    sentence1: str
    label: int
    sentence2: str | None = None

    def __post_init__(self):
        if self.label < 0:
            raise ValueError(f"label must be a non-negative class id, got {self.label}")


def load_task_file(path) -> list[NLUExample]:
    """Read a tab-separated task file: header `label<TAB>sentence1[<TAB>sentence2]`,
    one example per line."""
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except OSError as exc:
        raise ValueError(f"cannot read task file: {exc}") from exc
    if not lines:
        raise ValueError(f"{path}:1: empty task file")
    header = lines[0].split("\t")
    if header not in (["label", "sentence1"], ["label", "sentence1", "sentence2"]):
        raise ValueError(
            f"{path}:1: bad header {lines[0]!r}; expected label<TAB>sentence1[<TAB>sentence2]"
        )
    ncols = len(header)
    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        cols = line.split("\t")
        if len(cols) != ncols:
            raise ValueError(f"{path}:{lineno}: expected {ncols} tab-separated columns, got {len(cols)}")
        try:
            label = int(cols[0])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad label {cols[0]!r}") from exc
        try:
            examples.append(NLUExample(cols[1], label, cols[2] if ncols == 3 else None))
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    if not examples:
        raise ValueError(f"{path}: no examples after the header")
    return examples


def encode_example(vocab: Vocabulary, ex: NLUExample, max_length: int) -> tuple[np.ndarray, np.ndarray]:
    """Ids padded to max_length plus a 1.0/0.0 mask over real positions.

    Pairs are joined with a single separator token; when the pair overflows,
    tokens come off the end of whichever sentence is currently longer (ties
    shorten sentence2), so both sides keep their leading content.
    """
    if max_length < 1:
        raise ValueError(f"max_length must be positive, got {max_length}")
    ids1 = encode(vocab, ex.sentence1)
    if not ids1:
        raise ValueError("sentence1 is empty (no tokens)")
    if ex.sentence2 is None:
        ids = ids1[:max_length]
    else:
        ids2 = encode(vocab, ex.sentence2)
        n1, n2 = len(ids1), len(ids2)
        while n1 + n2 > max_length - 1:
            if n1 > n2:
                n1 -= 1
            else:
                n2 -= 1
        ids = ids1[:n1] + [SEP_ID] + ids2[:n2]
    out = np.full(max_length, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    mask = np.zeros(max_length)
    mask[: len(ids)] = 1.0
    return out, mask


def encode_dataset(
    vocab: Vocabulary, examples: Iterable[NLUExample], max_length: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack encode_example over a split: (N, L) ids, (N, L) mask, (N,) labels."""
    rows = [encode_example(vocab, ex, max_length) for ex in examples]
    ids = np.stack([r[0] for r in rows])
    mask = np.stack([r[1] for r in rows])
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return ids, mask, labels


# ---------------------------------------------------------------------------
# Task model


class TaskModel:
    """Donated backbone plus fresh text embeddings and classification matrix."""

    def __init__(
        self,
        backbone: BackboneWeights,
        params: dict[str, Tensor],
        vocab: Vocabulary,
        num_classes: int,
    ):
        self.backbone = backbone
        self.params = params
        self.vocab = vocab
        self.num_classes = num_classes

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return sorted(self.params)

    def trainable(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)] + self.backbone.trainable()


def attach_task_model(ckpt: Checkpoint, vocab: Vocabulary, num_classes: int, seed: int) -> TaskModel:
    """Build a classifier around the checkpoint's backbone.

    The token table, position table, and class matrix are drawn fresh from
    `seed` alone, so checkpoints of equal shape produce task models that
    agree everywhere except the backbone.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be at least 2, got {num_classes}")
    backbone = _backbone_from_checkpoint(ckpt)
    cfg = ckpt.config
    rng = np.random.default_rng(seed)
    params = {
        "task.token_embedding.table": parameter(rng.normal(0.0, INIT_STD, (len(vocab), cfg.d_model))),
        "task.position_embedding.table": parameter(
            rng.normal(0.0, INIT_STD, (cfg.max_positions, cfg.d_model))
        ),
        "task.cls.w": parameter(rng.normal(0.0, INIT_STD, (cfg.d_model, num_classes))),
    }
    return TaskModel(backbone, params, vocab, num_classes)


def task_forward(model: TaskModel, ids: np.ndarray, mask: np.ndarray, rng=None) -> Tensor:
    """Class logits (B, num_classes) read at each sequence's last real position."""
    ids = np.asarray(ids)
    mask = np.asarray(mask, dtype=np.float64)
    if ids.ndim != 2 or mask.shape != ids.shape:
        raise ValueError(f"ids and mask must be matching (B, T) arrays, got {ids.shape} and {mask.shape}")
    cfg = model.backbone.config
    B, T = ids.shape
    if T > cfg.max_positions:
        raise ContextOverflowError(f"sequence length {T} exceeds max_positions {cfg.max_positions}")
    lengths = mask.sum(axis=1).astype(np.int64)
    if (lengths < 1).any():
        raise ValueError("every example needs at least one real (non-pad) position")

    tok = reshape(embedding_lookup(model["task.token_embedding.table"], ids.reshape(-1)), (B, T, cfg.d_model))
    pos = reshape(embedding_lookup(model["task.position_embedding.table"], np.arange(T)), (1, T, cfg.d_model))
    h = backbone_forward(model.backbone, add(tok, pos), pad_mask=mask, rng=rng)
    flat = reshape(h, (B * T, cfg.d_model))
    pooled = take_rows(flat, np.arange(B) * T + lengths - 1)
    return matmul(pooled, model["task.cls.w"])


def task_predict(model: TaskModel, ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Class probabilities (B, num_classes); deterministic (no dropout)."""
    logits = task_forward(model, ids, mask, rng=None).data
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Fine-tuning


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 2e-5
    batch_size: int = 128
    max_length: int = 128
    epochs: int = 3
    seeds: tuple[int, ...] = (0, 1, 2)
    max_vocab: int = 10_000

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1 or self.max_length < 1 or self.epochs < 1:
            raise ValueError("batch_size, max_length, and epochs must all be positive")
        if not self.seeds:
            raise ValueError("need at least one seed")


def _trim(ids: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Drop all-pad tail columns; attention cost is quadratic in T and short
    # tasks would otherwise pay for max_length.
    t = int(mask.sum(axis=1).max())
    return ids[:, :t], mask[:, :t]


def _dev_accuracy(model: TaskModel, ids, mask, labels, batch_size: int) -> float:
    hits = 0
    for lo in range(0, len(ids), batch_size):
        bi, bm = _trim(ids[lo : lo + batch_size], mask[lo : lo + batch_size])
        probs = task_predict(model, bi, bm)
        hits += int((probs.argmax(axis=1) == labels[lo : lo + batch_size]).sum())
    return hits / len(ids)


def finetune(
    train_path,
    dev_path,
    ckpt: Checkpoint,
    cfg: FinetuneConfig,
    log_fn: Callable[[str], None] | None = None,
    vocab: Vocabulary | None = None,
) -> dict[int, float]:
    """Fine-tune the full model (backbone included) per seed; returns
    {seed: dev accuracy}. Unless one is passed in, the vocabulary is built
    from the training split, so every checkpoint provenance sees identical
    task-side initialization.
    """
    train = load_task_file(train_path)
    dev = load_task_file(dev_path)
    num_classes = max(2, max(ex.label for ex in train) + 1)
    bad = [ex.label for ex in dev if ex.label >= num_classes]
    if bad:
        raise ValueError(f"dev label {bad[0]} outside the {num_classes} classes seen in training")
    observed = {ex.label for ex in train} | {ex.label for ex in dev}
    if len(observed) == 1:
        warnings.warn("single-class task: dev accuracy will be trivially 1.0", stacklevel=2)

    if vocab is None:
        text = "\n".join(
            s for ex in train for s in (ex.sentence1, ex.sentence2) if s is not None
        )
        vocab = build_vocab(text, max_size=cfg.max_vocab)
    train_ids, train_mask, train_labels = encode_dataset(vocab, train, cfg.max_length)
    dev_ids, dev_mask, dev_labels = encode_dataset(vocab, dev, cfg.max_length)

    results: dict[int, float] = {}
    for seed in cfg.seeds:
        model = attach_task_model(ckpt, vocab, num_classes, seed)
        shuffle_rng, dropout_rng = (
            np.random.default_rng(s) for s in np.random.SeedSequence(seed).generate_state(2, np.uint64)
        )
        params = model.trainable()
        adam = AdamState()
        for epoch in range(cfg.epochs):
            order = shuffle_rng.permutation(len(train_ids))
            epoch_loss = 0.0
            for lo in range(0, len(order), cfg.batch_size):
                batch = order[lo : lo + cfg.batch_size]
                bi, bm = _trim(train_ids[batch], train_mask[batch])
                for p in params:
                    p.zero_grad()
                loss = cross_entropy(task_forward(model, bi, bm, rng=dropout_rng), train_labels[batch])
                loss.backward()
                grads = [p.grad for p in params]
                clip_global_norm(grads, GRAD_CLIP)
                adam_step(params, grads, adam, cfg.lr)
                epoch_loss += float(loss.data) * len(batch)
            if log_fn is not None:
                log_fn(f"seed {seed} epoch {epoch} loss {format(epoch_loss / len(order), '.17g')}")
        acc = _dev_accuracy(model, dev_ids, dev_mask, dev_labels, cfg.batch_size)
        results[seed] = acc
        if log_fn is not None:
            log_fn(f"seed {seed} dev_accuracy {format(acc, '.17g')}")
    return results


# ---------------------------------------------------------------------------
# Reporting


@dataclass
class MetricsReport:
    """Per-(model, task) accuracy summaries plus a per-model average column."""

    models: tuple[str, ...]
    tasks: tuple[str, ...]
    cells: dict[tuple[str, str], tuple[float, float, int]] = field(default_factory=dict)
    avg: dict[str, float] = field(default_factory=dict)

    def render_text(self) -> str:
        header = ["Model", *self.tasks, "Avg."]
        rows = [header]
        for m in self.models:
            row = [m]
            for t in self.tasks:
                cell = self.cells.get((m, t))
                row.append("-" if cell is None else _decorate(f"{cell[0]:.2f}±{cell[1]:.2f}", self._rank(m, t)))
            row.append(_decorate(f"{self.avg[m]:.2f}", self._rank(m, None)))
            rows.append(row)
        widths = [max(len(r[c]) for r in rows) for c in range(len(header))]
        out = []
        for r in rows:
            out.append("  ".join(r[c].ljust(widths[c]) if c == 0 else r[c].rjust(widths[c]) for c in range(len(r))))
        return "\n".join(out) + "\n"

    def render_tsv(self) -> str:
        lines = ["model\ttask\tmean\tstd\tn_seeds"]
        for m in self.models:
            for t in self.tasks:
                cell = self.cells.get((m, t))
                if cell is not None:
                    lines.append(f"{m}\t{t}\t{format(cell[0], '.17g')}\t{format(cell[1], '.17g')}\t{cell[2]}")
            lines.append(f"{m}\tAvg.\t{format(self.avg[m], '.17g')}\t\t")
        return "\n".join(lines) + "\n"

    def _rank(self, model: str, task: str | None) -> int:
        """0 = best mean in this column, 1 = second best, else 2."""
        if task is None:
            scored = [(self.avg[m], m) for m in self.models]
        else:
            scored = [(self.cells[(m, task)][0], m) for m in self.models if (m, task) in self.cells]
        order = [m for _, m in sorted(scored, key=lambda s: (-s[0], self.models.index(s[1])))]
        return order.index(model) if model in order[:2] else 2


def _decorate(text: str, rank: int) -> str:
    if rank == 0:
        return f"*{text}*"
    if rank == 1:
        return f"_{text}_"
    return text


def aggregate_report(results: Iterable[tuple[str, str, int, float]]) -> MetricsReport:
    """Fold (model, task, seed, accuracy) rows into mean±std cells.

    Cell std is the population formula over seeds; a model's Avg. is the
    plain mean of its per-task means. Rows are grouped in first-appearance
    order; a model missing some task is excluded from that task's column and
    its Avg. skips the hole, with a warning.
    """
    models: list[str] = []
    tasks: list[str] = []
    values: dict[tuple[str, str], dict[int, float]] = {}
    for model, task, seed, acc in results:
        if model not in models:
            models.append(model)
        if task not in tasks:
            tasks.append(task)
        per_seed = values.setdefault((model, task), {})
        if seed in per_seed:
            raise ValueError(f"duplicate result row for ({model}, {task}, seed {seed})")
        per_seed[seed] = acc
    if not values:
        raise ValueError("no results to aggregate")

    report = MetricsReport(models=tuple(models), tasks=tuple(tasks))
    for key, per_seed in values.items():
        arr = np.array([per_seed[s] for s in sorted(per_seed)])
        report.cells[key] = (float(arr.mean()), float(arr.std()), len(arr))
    for m in models:
        present = [report.cells[(m, t)][0] for t in tasks if (m, t) in report.cells]
        holes = [t for t in tasks if (m, t) not in report.cells]
        if holes:
            warnings.warn(f"model {m} has no results for {', '.join(holes)}; Avg. skips them", stacklevel=2)
        report.avg[m] = float(np.mean(present))
    return report
