"""Word-level language modeling on the shared backbone: vocabulary building,
document-aware chunking, tied-embedding next-token training, and the unigram
perplexity baseline it is judged against.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .backbone import (
    INIT_STD,
    BackboneConfig,
    BackboneWeights,
    ContextOverflowError,
    backbone_forward,
    init_backbone,
)
from .checkpoint import Checkpoint
from .optim import AdamState, LrSchedule, adam_step, clip_global_norm
from .tensor import (
    Tensor,
    add,
    cross_entropy,
    embedding_lookup,
    matmul,
    parameter,
    reshape,
    take_rows,
    transpose,
)

PAD_ID, UNK_ID, SEP_ID = 0, 1, 2
SPECIAL_TOKENS = ("<pad>", "<unk>", "<sep>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

GRAD_CLIP = 1.0


def tokenize(text: str) -> list[str]:
    """Lowercased words and individual punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Fixed token inventory; ids 0..2 are reserved for PAD/UNK/SEP."""

    id_to_token: tuple[str, ...]
    token_to_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.id_to_token[:3]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        mapping = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(mapping) != len(self.id_to_token):
            raise ValueError("vocabulary contains duplicate tokens")
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(self.id_to_token)


def build_vocab(corpus: str, max_size: int = 10_000, min_freq: int = 1) -> Vocabulary:
    """Frequency-ranked word vocabulary, ties broken alphabetically; max_size
    counts the three specials.
    """
    if max_size < len(SPECIAL_TOKENS) + 1:
        raise ValueError(f"max_size must allow at least one real token, got {max_size}")
    tokens = tokenize(corpus)
    if not tokens:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tokens)
    ranked = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    keep = ranked[: max_size - len(SPECIAL_TOKENS)]
    return Vocabulary(SPECIAL_TOKENS + tuple(keep))


def encode(vocab: Vocabulary, text: str) -> list[int]:
    return [vocab.token_to_id.get(tok, UNK_ID) for tok in tokenize(text)]


def decode(vocab: Vocabulary, ids: Sequence[int]) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise ValueError(f"token id {i} out of range [0, {len(vocab)})")
        out.append(vocab.id_to_token[i])
    return " ".join(out)


def save_vocab(vocab: Vocabulary, path) -> None:
    """One non-special token per line; id = line number + 3."""
    with open(path, "w", encoding="utf-8") as f:
        for tok in vocab.id_to_token[len(SPECIAL_TOKENS):]:
            f.write(tok + "\n")


def load_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8") as f:
        tokens = [line.rstrip("\n") for line in f]
    while tokens and tokens[-1] == "":
        tokens.pop()
    return Vocabulary(SPECIAL_TOKENS + tuple(tokens))


def chunk_corpus(corpus: str, vocab: Vocabulary, seq_len: int) -> np.ndarray:
    """Contiguous non-overlapping id chunks of length seq_len, never spanning
    the blank-line document boundaries. The tail of each document is padded;
    chunks with fewer than two real tokens carry no prediction target and are
    dropped.
    """
    if seq_len < 2:
        raise ValueError(f"seq_len must be at least 2, got {seq_len}")
    chunks = []
    for doc in re.split(r"\n\s*\n", corpus):
        ids = encode(vocab, doc)
        for start in range(0, len(ids), seq_len):
            piece = ids[start : start + seq_len]
            if len(piece) < 2:
                continue
            piece = piece + [PAD_ID] * (seq_len - len(piece))
            chunks.append(piece)
    return np.array(chunks, dtype=np.int64).reshape(len(chunks), seq_len)


# ---------------------------------------------------------------- model

class LMHeadWeights:
    """Token and position embedding tables. The output projection reuses the
    token table (weight tying), so there is no separate projection matrix.
    """

    def __init__(self, vocab_size: int, d_model: int, max_positions: int,
                 params: dict[str, Tensor]):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.max_positions = max_positions
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return sorted(self.params)

    def trainable(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]


def lm_head_param_names() -> list[str]:
    return sorted(["lm.token_embedding.table", "lm.position_embedding.table"])


def init_lm_head(vocab_size: int, d_model: int, max_positions: int, seed: int) -> LMHeadWeights:
    if vocab_size < len(SPECIAL_TOKENS) + 1:
        raise ValueError(f"vocab_size too small: {vocab_size}")
    rng = np.random.default_rng(seed)
    params = {
        "lm.token_embedding.table": parameter(rng.normal(0.0, INIT_STD, (vocab_size, d_model))),
        "lm.position_embedding.table": parameter(rng.normal(0.0, INIT_STD, (max_positions, d_model))),
    }
    return LMHeadWeights(vocab_size, d_model, max_positions, params)


def lm_forward(
    head: LMHeadWeights,
    backbone: BackboneWeights,
    ids: np.ndarray,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Next-token logits: the score for token t sits at position t - 1.

    `ids` is (T,) or (B, T) integer token ids; the result matches with a
    trailing vocab axis. PAD positions are masked out of attention.
    """
    ids = np.asarray(ids)
    if ids.ndim not in (1, 2) or not np.issubdtype(ids.dtype, np.integer):
        raise ValueError(f"ids must be 1-D or 2-D integers, got {ids.dtype} {ids.shape}")
    squeeze = ids.ndim == 1
    batch = ids.reshape(1, -1) if squeeze else ids
    B, T = batch.shape
    if T > head.max_positions:
        raise ContextOverflowError(f"sequence length {T} exceeds max_positions {head.max_positions}")
    tok_table = head["lm.token_embedding.table"]
    pos_table = head["lm.position_embedding.table"]
    x = add(
        reshape(embedding_lookup(tok_table, batch.reshape(-1)), (B, T, head.d_model)),
        reshape(embedding_lookup(pos_table, np.arange(T)), (1, T, head.d_model)),
    )
    h = backbone_forward(backbone, x, pad_mask=(batch != PAD_ID).astype(np.float64), rng=rng)
    flat = reshape(h, (B * T, head.d_model))
    logits = matmul(flat, transpose(tok_table, (1, 0)))
    logits = reshape(logits, (B, T, head.vocab_size))
    return reshape(logits, (T, head.vocab_size)) if squeeze else logits


def lm_loss(
    head: LMHeadWeights,
    backbone: BackboneWeights,
    ids: np.ndarray,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean next-token cross-entropy over non-PAD targets."""
    ids = np.asarray(ids)
    batch = ids.reshape(1, -1) if ids.ndim == 1 else ids
    B, T = batch.shape
    logits = lm_forward(head, backbone, batch, rng=rng)
    flat = reshape(logits, (B * T, head.vocab_size))
    rows = (np.arange(B)[:, None] * T + np.arange(T - 1)[None, :]).reshape(-1)
    return cross_entropy(take_rows(flat, rows), batch[:, 1:].reshape(-1), ignore_index=PAD_ID)


def count_targets(chunks: np.ndarray) -> int:
    return int((np.asarray(chunks)[:, 1:] != PAD_ID).sum())


def perplexity(head: LMHeadWeights, backbone: BackboneWeights, chunks: np.ndarray,
               batch_size: int = 8) -> float:
    """exp(mean next-token NLL) over every non-PAD target in `chunks`."""
    chunks = np.asarray(chunks)
    total_nll = 0.0
    total_targets = 0
    for start in range(0, len(chunks), batch_size):
        part = chunks[start : start + batch_size]
        n = count_targets(part)
        total_nll += float(lm_loss(head, backbone, part).data) * n
        total_targets += n
    if total_targets == 0:
        raise ValueError("no prediction targets in evaluation chunks")
    return float(np.exp(total_nll / total_targets))


def unigram_perplexity(train_chunks: np.ndarray, eval_chunks: np.ndarray,
                       vocab_size: int) -> float:
    """Baseline: add-one-smoothed unigram frequencies fit on the train split,
    scored on the eval split's non-PAD targets.
    """
    train_tokens = np.asarray(train_chunks).reshape(-1)
    train_tokens = train_tokens[train_tokens != PAD_ID]
    counts = np.bincount(train_tokens, minlength=vocab_size).astype(np.float64)
    logp = np.log((counts + 1.0) / (counts.sum() + vocab_size))
    targets = np.asarray(eval_chunks)[:, 1:].reshape(-1)
    targets = targets[targets != PAD_ID]
    if targets.size == 0:
        raise ValueError("no prediction targets in evaluation chunks")
    return float(np.exp(-logp[targets].mean()))


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class LMTrainConfig:
    lr: float = 5e-5
    batch_size: int = 4
    total_steps: int = 5000
    seq_len: int = 128
    seed: int = 0
    max_vocab: int = 10_000
    min_freq: int = 1
    eval_every: int = 250
    eval_batch_size: int = 8

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("lr, batch_size, and total_steps must be positive")
        if self.seq_len < 2:
            raise ValueError("seq_len must be at least 2")
        if self.eval_every < 1 or self.eval_batch_size < 1:
            raise ValueError("eval_every and eval_batch_size must be positive")


@dataclass
class LMTrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    eval_steps: list[int] = field(default_factory=list)
    eval_perplexities: list[float] = field(default_factory=list)

    def lines(self) -> list[str]:
        by_eval = dict(zip(self.eval_steps, self.eval_perplexities))
        out = []
        for step, loss, lr in zip(self.steps, self.losses, self.lrs):
            line = f"step {step} loss {format(loss, '.17g')} lr {format(lr, '.17g')}"
            if step in by_eval:
                line += f" val_perplexity {format(by_eval[step], '.17g')}"
            out.append(line)
        return out


def split_chunks(chunks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic validation split: every 20th chunk (index % 20 == 19)."""
    idx = np.arange(len(chunks))
    return chunks[idx % 20 != 19], chunks[idx % 20 == 19]


def train_lm(
    corpus: str,
    cfg: LMTrainConfig,
    backbone_cfg: BackboneConfig | None = None,
    log_fn: Callable[[str], None] | None = None,
) -> tuple[Checkpoint, LMTrainLog, Vocabulary]:
    """Train next-token prediction on seq_len chunks of the corpus; returns
    the weights as a Checkpoint with provenance "lm-pretrained", the loss and
    validation-perplexity curves, and the vocabulary. Bit-identical per
    (corpus, cfg). When the corpus is too small to spare a validation split,
    perplexity is tracked on the training chunks instead.
    """
    backbone_cfg = backbone_cfg or BackboneConfig()
    if cfg.seq_len > backbone_cfg.max_positions:
        raise ValueError(
            f"seq_len {cfg.seq_len} exceeds max_positions {backbone_cfg.max_positions}"
        )
    vocab = build_vocab(corpus, max_size=cfg.max_vocab, min_freq=cfg.min_freq)
    chunks = chunk_corpus(corpus, vocab, cfg.seq_len)
    if len(chunks) == 0:
        raise ValueError("corpus too small: chunking produced no trainable sequences")
    train, val = split_chunks(chunks)
    if len(train) == 0:
        train, val = val, train
    eval_chunks = val if len(val) else train

    seeds = np.random.SeedSequence(cfg.seed).generate_state(3, np.uint64)
    sampler_rng = np.random.default_rng(seeds[0])
    dropout_rng = np.random.default_rng(seeds[1])

    backbone = init_backbone(backbone_cfg, int(seeds[0] % 2**31))
    head = init_lm_head(len(vocab), backbone_cfg.d_model, backbone_cfg.max_positions,
                        int(seeds[1] % 2**31))
    params = head.trainable() + backbone.trainable()
    adam = AdamState()
    sched = LrSchedule(cfg.lr, warmup_steps=0)

    def evaluate() -> float:
        return perplexity(head, backbone, eval_chunks, batch_size=cfg.eval_batch_size)

    log = LMTrainLog()
    for step in range(cfg.total_steps):
        if step % cfg.eval_every == 0:
            log.eval_steps.append(step)
            log.eval_perplexities.append(evaluate())
        batch = train[sampler_rng.integers(0, len(train), size=cfg.batch_size)]
        for p in params:
            p.zero_grad()
        loss = lm_loss(head, backbone, batch, rng=dropout_rng)
        loss.backward()
        grads = [p.grad for p in params]
        clip_global_norm(grads, GRAD_CLIP)
        lr = sched.lr(step)
        adam_step(params, grads, adam, lr)
        log.steps.append(step)
        log.losses.append(float(loss.data))
        log.lrs.append(lr)
        if log_fn is not None:
            line = f"step {step} loss {format(log.losses[-1], '.17g')} lr {format(lr, '.17g')}"
            if log.eval_steps and log.eval_steps[-1] == step:
                line += f" val_perplexity {format(log.eval_perplexities[-1], '.17g')}"
            log_fn(line)
    final_ppl = evaluate()
    log.eval_steps.append(cfg.total_steps)
    log.eval_perplexities.append(final_ppl)
    if log_fn is not None:
        log_fn(f"final val_perplexity {format(final_ppl, '.17g')}")

    merged = {name: head[name].data for name in head.names()}
    merged.update({name: backbone[name].data for name in backbone.names()})
    ckpt = Checkpoint(
        params=merged,
        config=backbone_cfg,
        provenance="lm-pretrained",
        meta={
            "vocab_size": str(len(vocab)),
            "seq_len": str(cfg.seq_len),
            "steps": str(cfg.total_steps),
            "seed": str(cfg.seed),
            "train_chunks": str(len(train)),
            "val_chunks": str(len(val)),
            "final_loss": format(log.losses[-1], ".17g"),
            "final_val_perplexity": format(final_ppl, ".17g"),
            "unigram_val_perplexity": format(
                unigram_perplexity(train, eval_chunks, len(vocab)), ".17g"
            ),
        },
    )
    return ckpt, log, vocab
