"""Desk-scale context encoder.

A small pre-LN transformer trained from scratch. Anything exposing the same
``forward(token_ids, mask) -> (B, T, d)`` contract and a ``dim`` attribute can
stand in for it (e.g. an adapter around a pretrained RoBERTa).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from tracecoder.corpus import Chunk, LabelSpace, Vocab, tokenize
from tracecoder.errors import ConfigError, EncoderError, ValidationError
from tracecoder.ops import masked_softmax

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d: int = 128
    layers: int = 2
    heads: int = 4
    ff: int = 256
    max_position: int = 512
    dropout: float = 0.1
    seed: int = 0
    cls_id: int = Vocab.cls_id

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if min(self.vocab_size, self.d, self.heads, self.ff, self.max_position) < 1:
            raise ConfigError("encoder sizes must be positive")
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, ff, dropout):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, ff)
        self.ff2 = nn.Linear(ff, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        B, T, d = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).view(B, T, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)  # (B, H, T, T)
        attn = masked_softmax(scores, mask[:, None, None, :])
        ctx = (self.drop(attn) @ v).transpose(1, 2).reshape(B, T, d)
        x = x + self.drop(self.out(ctx))
        x = x + self.drop(self.ff2(F.gelu(self.ff1(self.ln2(x)))))
        return x


class ContextEncoder(nn.Module):
    """Token + learned position embeddings followed by a transformer stack."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            self.tok_emb = nn.Embedding(config.vocab_size, config.d)
            self.pos_emb = nn.Embedding(config.max_position, config.d)
            nn.init.normal_(self.tok_emb.weight, std=0.5)
            nn.init.normal_(self.pos_emb.weight, std=0.02)
            # a zero [CLS] start makes the pooled vector content-driven before any training
            with torch.no_grad():
                self.tok_emb.weight[config.cls_id].zero_()
            self.layers = nn.ModuleList(
                EncoderLayer(config.d, config.heads, config.ff, config.dropout)
                for _ in range(config.layers)
            )
            self.ln_f = nn.LayerNorm(config.d)

    @property
    def dim(self) -> int:
        return self.config.d

    def forward(self, token_ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """``token_ids``/``mask`` of shape (..., T) → representations (..., T, d)."""
        lead = token_ids.shape[:-1]
        T = token_ids.shape[-1]
        if T > self.config.max_position:
            raise EncoderError(f"sequence length {T} exceeds max_position {self.config.max_position}")
        if token_ids.numel() and (token_ids.min() < 0 or token_ids.max() >= self.config.vocab_size):
            raise EncoderError(
                f"token id out of range [0, {self.config.vocab_size}): "
                f"min={int(token_ids.min())}, max={int(token_ids.max())}"
            )
        ids = token_ids.reshape(-1, T)
        m = mask.reshape(-1, T).bool()
        pos = torch.arange(T, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)[None]
        for layer in self.layers:
            x = layer(x, m)
        return self.ln_f(x).reshape(*lead, T, self.config.d)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().to(torch.float64).cpu().numpy().tobytes())
        return h.hexdigest()[:16]


def encode_chunk(chunk: Chunk, encoder: ContextEncoder) -> torch.Tensor:
    p = next(encoder.parameters())
    ids = torch.tensor([chunk.token_ids], dtype=torch.long, device=p.device)
    mask = torch.tensor([chunk.attention_mask], dtype=torch.bool, device=p.device)
    return encoder(ids, mask)[0]


def _cls_batch(texts: Sequence[str], vocab: Vocab, max_position: int):
    rows = [[vocab.cls_id] + tokenize(t, vocab)[: max_position - 1] for t in texts]
    width = max(len(r) for r in rows)
    ids = torch.full((len(rows), width), vocab.pad_id, dtype=torch.long)
    mask = torch.zeros((len(rows), width), dtype=torch.bool)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = torch.tensor(r)
        mask[i, : len(r)] = True
    return ids, mask


def encode_texts(texts: Sequence[str], encoder: ContextEncoder, vocab: Vocab,
                 batch_size: int = 64) -> torch.Tensor:
    """Pooled [CLS] representation per text, shape (len(texts), d)."""
    p = next(encoder.parameters())
    if not texts:
        return torch.zeros((0, encoder.dim), dtype=p.dtype)
    outs = []
    for i in range(0, len(texts), batch_size):
        ids, mask = _cls_batch(texts[i : i + batch_size], vocab, encoder.config.max_position)
        outs.append(encoder(ids.to(p.device), mask.to(p.device))[:, 0])
    return torch.cat(outs)


def encode_text(text: str, encoder: ContextEncoder, vocab: Vocab) -> torch.Tensor:
    return encode_texts([text], encoder, vocab)[0]


@dataclass
class LabelMatrix:
    matrix: torch.Tensor  # (L_n, d), row order = label space order
    codes: tuple[str, ...]
    frozen: bool = True


def encode_labels(label_space: LabelSpace, encoder: ContextEncoder, vocab: Vocab,
                  frozen: bool = True) -> LabelMatrix:
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        m = encode_texts([label_space.descriptions[c] for c in label_space.codes], encoder, vocab)
    encoder.train(was_training)
    return LabelMatrix(m.detach().clone(), tuple(label_space.codes), frozen)


class SentenceEncoder:
    """Frozen text → vector adapter used for knowledge selection."""

    def __init__(self, encoder: ContextEncoder, vocab: Vocab, batch_size: int = 64):
        self.encoder = encoder
        self.vocab = vocab
        self.batch_size = batch_size

    @property
    def id(self) -> str:
        return f"desk-{self.encoder.fingerprint()}-{self.vocab.fingerprint()}"

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        was_training = self.encoder.training
        self.encoder.eval()
        with torch.no_grad():
            out = encode_texts(list(texts), self.encoder, self.vocab, self.batch_size)
        self.encoder.train(was_training)
        return out.to(torch.float64).cpu().numpy()


def save_encoder(path, encoder: ContextEncoder, vocab: Vocab):
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "config": asdict(encoder.config),
            "vocab": list(vocab.tokens),
            "vocab_hash": vocab.fingerprint(),
            "state_dict": encoder.state_dict(),
        },
        path,
    )


def load_encoder(path, vocab: Vocab | None = None) -> tuple[ContextEncoder, Vocab]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported encoder checkpoint version {blob.get('version')}")
    stored = Vocab(blob["vocab"])
    if vocab is not None and vocab.fingerprint() != blob["vocab_hash"]:
        raise ValidationError(
            f"vocab hash mismatch: checkpoint {blob['vocab_hash']} vs given {vocab.fingerprint()}"
        )
    enc = ContextEncoder(EncoderConfig(**blob["config"]))
    enc.load_state_dict(blob["state_dict"])
    return enc, stored
