"""Desk-scale transformer encoder standing in for a large pretrained model.

Produces one contextual activation row per input token; both task heads
consume these rows. Optionally continues training as a masked language
model on the task corpus ("in-task finetuning") before supervised training
— masked-token cross-entropy only, no next-sentence objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .errors import ContractError
from .layers import LayerNorm, Linear, MultiHeadAttention, init_matrix

MASK_SELECT_RATE = 0.15  # fraction of positions chosen for MLM prediction
MASK_AS_MASK = 0.8       # of chosen: replaced by the mask token
MASK_AS_RANDOM = 0.1     # of chosen: replaced by a random learned token


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    hidden_dim: int = 64
    layers: int = 2
    heads: int = 4
    ff_dim: int = 128
    max_positions: int = 128
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden_dim % self.heads != 0:
            raise ContractError(
                f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.vocab_size < 1 or self.max_positions < 1:
            raise ContractError("vocab_size and max_positions must be positive")

    def to_dict(self):
        return {"vocab_size": self.vocab_size, "hidden_dim": self.hidden_dim,
                "layers": self.layers, "heads": self.heads, "ff_dim": self.ff_dim,
                "max_positions": self.max_positions, "dropout": self.dropout}


class EncoderLayer:
    def __init__(self, config, rng, dtype):
        n = config.hidden_dim
        self.attn = MultiHeadAttention(n, config.heads, rng, dtype)
        self.ln1 = LayerNorm(n, dtype)
        self.ff1 = Linear(n, config.ff_dim, rng, dtype)
        self.ff2 = Linear(config.ff_dim, n, rng, dtype)
        self.ln2 = LayerNorm(n, dtype)

    def __call__(self, x, dropout_rate, rng, training):
        a = self.attn(x, x)
        a = ag.dropout(a, dropout_rate, rng, training)
        x = self.ln1(ag.add(x, a))
        f = self.ff2(ag.gelu(self.ff1(x)))
        f = ag.dropout(f, dropout_rate, rng, training)
        return self.ln2(ag.add(x, f))

    def named(self, prefix):
        out = {}
        out.update(self.attn.named(f"{prefix}.attn"))
        out.update(self.ln1.named(f"{prefix}.ln1"))
        out.update(self.ff1.named(f"{prefix}.ff1"))
        out.update(self.ff2.named(f"{prefix}.ff2"))
        out.update(self.ln2.named(f"{prefix}.ln2"))
        return out


class EncoderModel:
    def __init__(self, config: EncoderConfig, rng, dtype=np.float32):
        self.config = config
        self.token_emb = init_matrix(rng, config.vocab_size, config.hidden_dim, dtype)
        self.pos_emb = init_matrix(rng, config.max_positions, config.hidden_dim, dtype)
        self.layers = [EncoderLayer(config, rng, dtype) for _ in range(config.layers)]
        self.final_ln = LayerNorm(config.hidden_dim, dtype)
        self.mlm_head = Linear(config.hidden_dim, config.vocab_size, rng, dtype)

    def named_parameters(self, prefix="encoder"):
        out = {f"{prefix}.token_emb": self.token_emb, f"{prefix}.pos_emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"{prefix}.layers.{i}"))
        out.update(self.final_ln.named(f"{prefix}.final_ln"))
        out.update(self.mlm_head.named(f"{prefix}.mlm_head"))
        return out

    def parameters(self):
        return list(self.named_parameters().values())


def encode(model: EncoderModel, token_ids, training=False, rng=None) -> ag.Tensor:
    """Contextual activations, one row per token; deterministic at inference."""
    ids = np.asarray(token_ids, dtype=np.int64)
    t = len(ids)
    cfg = model.config
    if t < 1:
        raise ContractError("encode needs at least one token")
    if t > cfg.max_positions:
        raise ContractError(f"sequence length {t} exceeds max_positions {cfg.max_positions}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ContractError("token id out of vocabulary range")
    x = ag.add(ag.embedding_lookup(model.token_emb, ids),
               ag.narrow(model.pos_emb, 0, 0, t))
    x = ag.dropout(x, cfg.dropout, rng, training)
    for layer in model.layers:
        x = layer(x, cfg.dropout, rng, training)
    return model.final_ln(x)


def _mask_sequence(ids, vocab, rng, rate):
    """BERT-style corruption: of selected positions, 80% mask token, 10%
    random learned token, 10% unchanged. Returns (corrupted ids, positions)."""
    ids = list(ids)
    positions = [i for i in range(len(ids)) if rng.random() < rate]
    corrupted = list(ids)
    n_learned = vocab.size - vocab.n_reserved
    for i in positions:
        roll = rng.random()
        if roll < MASK_AS_MASK:
            corrupted[i] = vocab.MASK
        elif roll < MASK_AS_MASK + MASK_AS_RANDOM and n_learned > 0:
            corrupted[i] = vocab.n_reserved + int(rng.integers(0, n_learned))
    return corrupted, positions


def mlm_loss(model, ids, vocab, rng, rate=MASK_SELECT_RATE, training=True):
    """Masked-token cross-entropy for one sequence, or None if nothing was masked."""
    corrupted, positions = _mask_sequence(ids, vocab, rng, rate)
    if not positions:
        return None
    e = encode(model, corrupted, training=training, rng=rng)
    logits = model.mlm_head(e)
    picked = ag.embedding_lookup(logits, positions)
    gold = [ids[i] for i in positions]
    return ag.cross_entropy_label_smoothed(picked, gold, eps=0.0)


def mlm_pretrain(model: EncoderModel, sequences, vocab, rng, epochs: int = 3,
                 lr: float = 2e-5, warmup_frac: float = 0.1, batch_size: int = 16,
                 mask_rate: float = MASK_SELECT_RATE) -> list[float]:
    """Continue training the encoder as a masked LM over the task corpus.

    Returns the mean masked-token loss per epoch. A mask rate of zero makes
    every batch empty, so parameters stay untouched.
    """
    sequences = [list(s) for s in sequences if len(s) > 0]
    if not sequences:
        raise ContractError("mlm_pretrain needs a non-empty corpus")
    params = model.parameters()
    micro_per_epoch = max(1, (len(sequences) + batch_size - 1) // batch_size)
    opt = ag.OptimizerState(params, lr=lr, total_steps=max(1, epochs * micro_per_epoch),
                            warmup_frac=warmup_frac, accum_steps=1)
    epoch_losses = []
    for _ in range(epochs):
        order = rng.permutation(len(sequences))
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            losses = []
            for si in chunk:
                loss = mlm_loss(model, sequences[si], vocab, rng, rate=mask_rate)
                if loss is not None:
                    losses.append(loss)
            if not losses:
                continue
            batch_loss = losses[0]
            for extra in losses[1:]:
                batch_loss = ag.add(batch_loss, extra)
            batch_loss = ag.smul(batch_loss, 1.0 / len(losses))
            total += float(batch_loss.data) * len(losses)
            count += len(losses)
            batch_loss.backward()
            ag.adam_step(opt, divisor=1)
        epoch_losses.append(total / count if count else 0.0)
    return epoch_losses


def mlm_mean_loss(model, sequences, vocab, seed, rate=MASK_SELECT_RATE) -> float:
    """Average masked-token loss under a fixed masking seed (no training)."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    with ag.no_grad():
        for seq in sequences:
            loss = mlm_loss(model, list(seq), vocab, rng, rate=rate, training=False)
            if loss is not None:
                total += float(loss.data)
                count += 1
    return total / count if count else 0.0
