"""Fusion, convolutional prediction head and the assembled model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from tracecoder.attention import (
    AttentionOutput,
    KnowledgeContextCrossAttention,
    LabelContextCrossAttention,
    LabelSelfAttention,
)
from tracecoder.corpus import Chunk, Document, Vocab, chunk, tokenize
from tracecoder.encoder import ContextEncoder
from tracecoder.errors import ConfigError, ValidationError

BRANCHES = ("lsa", "lcca", "kcca")
EPS = 1e-7


@dataclass(frozen=True)
class Branches:
    lsa: bool = True
    lcca: bool = True
    kcca: bool = True

    def __post_init__(self):
        if not (self.lsa or self.lcca or self.kcca):
            raise ConfigError("at least one attention branch must be enabled")

    def enabled(self) -> tuple[str, ...]:
        return tuple(b for b in BRANCHES if getattr(self, b))


def fuse(h_lsa, h_lcca, h_kcca, branches: Branches = Branches()) -> torch.Tensor:
    """Stack branch outputs (..., L, d) into (..., L, 3, d); disabled branches are zeros."""
    parts = dict(zip(BRANCHES, (h_lsa, h_lcca, h_kcca)))
    if not any(getattr(branches, b) for b in BRANCHES):
        raise ConfigError("at least one attention branch must be enabled")
    ref = next(parts[b] for b in branches.enabled())
    chans = []
    for b in BRANCHES:
        if getattr(branches, b):
            if parts[b] is None:
                raise ValidationError(f"branch {b!r} is enabled but has no representation")
            if parts[b].shape != ref.shape:
                raise ValidationError(f"branch {b!r} has shape {tuple(parts[b].shape)}, "
                                      f"expected {tuple(ref.shape)}")
            chans.append(parts[b])
        else:
            chans.append(torch.zeros_like(ref))
    return torch.stack(chans, dim=-2)


class ConvHead(nn.Module):
    """Per-label Conv1d(3→F, k) → LeakyReLU → Conv1d(F→1, 1) along the feature axis.

    The remaining length-d axis is mean-reduced to a single logit per label.
    """

    def __init__(self, channels: int = 64, kernel_size: int = 3, leaky_slope: float = 0.01):
        super().__init__()
        if channels < 1:
            raise ConfigError("head channels must be >= 1")
        if kernel_size % 2 == 0:
            raise ConfigError("head kernel size must be odd")
        self.conv1 = nn.Conv1d(3, channels, kernel_size, padding=kernel_size // 2)
        self.conv2 = nn.Conv1d(channels, 1, 1)
        self.leaky_slope = leaky_slope

    def forward(self, h_fused: torch.Tensor) -> torch.Tensor:
        lead = h_fused.shape[:-2]
        x = h_fused.reshape(-1, 3, h_fused.shape[-1])
        x = F.leaky_relu(self.conv1(x), self.leaky_slope)
        return self.conv2(x).mean(dim=(1, 2)).reshape(lead)


def forward_head(h_fused: torch.Tensor, head: ConvHead) -> torch.Tensor:
    """Probabilities per label."""
    return torch.sigmoid(head(h_fused))


def bce_loss(P: torch.Tensor, Y: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    if P.shape != Y.shape:
        raise ValidationError(f"shape mismatch: P {tuple(P.shape)} vs Y {tuple(Y.shape)}")
    P = P.clamp(EPS, 1 - EPS)
    Y = Y.to(P.dtype)
    return -(Y * torch.log(P) + (1 - Y) * torch.log(1 - P)).mean()


@dataclass
class ModelOutput:
    logits: torch.Tensor  # (B, L)
    attention: dict[str, AttentionOutput]

    @property
    def probs(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)


class TraceCoder(nn.Module):
    """Encoder + hybrid attention + convolutional head.

    ``label_matrix`` (L, d), ``k_best`` (L, M, d) and ``k_avg`` (L, d) are
    buffers; the label matrix becomes a parameter with ``train_labels=True``.
    """

    def __init__(self, encoder: ContextEncoder, label_matrix: torch.Tensor,
                 k_best: torch.Tensor, k_avg: torch.Tensor, branches: Branches = Branches(),
                 head_channels: int = 64, kernel_size: int = 3, leaky_slope: float = 0.01,
                 d_a: int | None = None, kcca_literal: bool = False, train_labels: bool = False,
                 seed: int = 0):
        super().__init__()
        d = encoder.dim
        L = label_matrix.shape[0]
        if label_matrix.shape != (L, d) or k_best.shape[0] != L or k_best.shape[2] != d \
                or k_avg.shape != (L, d):
            raise ValidationError(
                f"inconsistent shapes: labels {tuple(label_matrix.shape)}, "
                f"k_best {tuple(k_best.shape)}, k_avg {tuple(k_avg.shape)}, d={d}"
            )
        self.encoder = encoder
        self.branches = branches
        dtype = next(encoder.parameters()).dtype
        if train_labels:
            self.label_matrix = nn.Parameter(label_matrix.detach().to(dtype).clone())
        else:
            self.register_buffer("label_matrix", label_matrix.detach().to(dtype).clone())
        self.register_buffer("k_best", k_best.detach().to(dtype).clone())
        self.register_buffer("k_avg", k_avg.detach().to(dtype).clone())
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.lsa = LabelSelfAttention(d, L, d_a)
            self.lcca = LabelContextCrossAttention(d)
            self.kcca = KnowledgeContextCrossAttention(d, literal=kcca_literal)
            self.head = ConvHead(head_channels, kernel_size, leaky_slope)
        self.to(dtype)

    @property
    def n_labels(self) -> int:
        return self.label_matrix.shape[0]

    def forward(self, token_ids: torch.Tensor, mask: torch.Tensor) -> ModelOutput:
        H = self.encoder(token_ids, mask)
        mask = mask.bool()
        att: dict[str, AttentionOutput] = {}
        if self.branches.lsa:
            att["lsa"] = self.lsa(H, mask)
        if self.branches.lcca:
            att["lcca"] = self.lcca(self.label_matrix, H, mask)
        if self.branches.kcca:
            att["kcca"] = self.kcca(self.k_best, self.k_avg, H, mask)
        fused = fuse(*(att[b].rep if b in att else None for b in BRANCHES), self.branches)
        return ModelOutput(self.head(fused), att)


def document_chunks(doc: Document, vocab: Vocab, chunk_size: int, max_length: int,
                    stride: int | None = None) -> list[Chunk]:
    return chunk(tokenize(doc.text, vocab), chunk_size, max_length, doc_id=doc.id,
                 pad_id=vocab.pad_id, stride=stride)


def collate(chunk_lists: Sequence[Sequence[Chunk]], pad_id: int = 0):
    """Pad to the batch's largest chunk count → (ids, mask) of shape (B, C, T)."""
    B = len(chunk_lists)
    C = max(len(cl) for cl in chunk_lists)
    T = len(chunk_lists[0][0].token_ids)
    ids = torch.full((B, C, T), pad_id, dtype=torch.long)
    mask = torch.zeros((B, C, T), dtype=torch.bool)
    for b, cl in enumerate(chunk_lists):
        for c, ch in enumerate(cl):
            ids[b, c] = torch.tensor(ch.token_ids)
            mask[b, c] = torch.tensor(ch.attention_mask, dtype=torch.bool)
    return ids, mask


def n_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)

