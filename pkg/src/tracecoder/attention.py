"""The three label-aligned attention branches.

Shapes used throughout (B = batch, C = chunks, T = chunk length,
L = number of labels, M = knowledge rows per label, d = hidden size):

* ``H``     (B, C, T, d) chunk representations
* ``mask``  (B, C, T)    true at real tokens

Every branch returns an :class:`AttentionOutput` whose ``rep`` is (B, L, d).
No projection carries a bias, so a chunk with no real tokens contributes an
exact zero to the chunk sums.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from tracecoder.errors import NoAttendableContent
from tracecoder.ops import masked_softmax


@dataclass
class AttentionOutput:
    rep: torch.Tensor
    # (B, C, L, T) for lsa/lcca; (B, L, M, C*T) for kcca
    weights: torch.Tensor


def _linear(n_in, n_out):
    lin = nn.Linear(n_in, n_out, bias=False)
    nn.init.xavier_uniform_(lin.weight)
    return lin


def check_attendable(mask: torch.Tensor):
    per_doc = mask.reshape(mask.shape[0], -1).any(dim=1)
    if not bool(per_doc.all()):
        bad = [int(i) for i in torch.nonzero(~per_doc).flatten()]
        raise NoAttendableContent(f"documents at batch positions {bad} have no non-padding tokens")


class LabelSelfAttention(nn.Module):
    """softmax(W2 tanh(W1 H)) per chunk, then W3 applied to each chunk's output and summed."""

    def __init__(self, d: int, n_labels: int, d_a: int | None = None):
        super().__init__()
        d_a = d if d_a is None else d_a
        self.W1 = _linear(d, d_a)
        self.W2 = _linear(d_a, n_labels)
        self.W3 = _linear(d, d)

    def forward(self, H, mask) -> AttentionOutput:
        check_attendable(mask)
        scores = self.W2(torch.tanh(self.W1(H))).transpose(-1, -2)  # (B, C, L, T)
        alpha = masked_softmax(scores, mask[:, :, None, :])
        per_chunk = alpha @ H  # (B, C, L, d)
        return AttentionOutput(self.W3(per_chunk).sum(dim=1), alpha)


class LabelContextCrossAttention(nn.Module):
    """Label embeddings as queries over each chunk; W4 per chunk, summed."""

    def __init__(self, d: int):
        super().__init__()
        self.q = _linear(d, d)
        self.k = _linear(d, d)
        self.v = _linear(d, d)
        self.W4 = _linear(d, d)

    def forward(self, label_matrix, H, mask) -> AttentionOutput:
        check_attendable(mask)
        d = H.shape[-1]
        Q = self.q(label_matrix)  # (L, d)
        scores = torch.einsum("ld,bctd->bclt", Q, self.k(H)) / math.sqrt(d)
        w = masked_softmax(scores, mask[:, :, None, :])
        per_chunk = w @ self.v(H)  # (B, C, L, d)
        return AttentionOutput(self.W4(per_chunk).sum(dim=1), w)


class KnowledgeContextCrossAttention(nn.Module):
    """Selected knowledge rows as queries over the whole document.

    Values are projected document positions; the pooled knowledge vector
    enters through the residual ``Wg · K_avg``. With ``literal=True`` the
    values are the projected pooled knowledge vector itself, which makes the
    output independent of the document (kept for comparison only).
    """

    def __init__(self, d: int, literal: bool = False):
        super().__init__()
        self.literal = literal
        self.q = _linear(d, d)
        self.k = _linear(d, d)
        self.v = _linear(d, d)
        self.Wg = _linear(d, d)

    def forward(self, k_best, k_avg, H, mask) -> AttentionOutput:
        check_attendable(mask)
        B, C, T, d = H.shape
        H_all = H.reshape(B, C * T, d)
        m_all = mask.reshape(B, C * T)
        scores = torch.einsum("lmd,bnd->blmn", self.q(k_best), self.k(H_all)) / math.sqrt(d)
        w = masked_softmax(scores, m_all[:, None, None, :])  # (B, L, M, C*T)
        if self.literal:
            # every value row is the same vector, so the output is that vector
            vals = self.v(k_avg)  # (L, d)
            u = (w.sum(dim=-1, keepdim=True) * vals[None, :, None, :]).mean(dim=2)
            return AttentionOutput(u, w)
        u = torch.einsum("blmn,bnd->blmd", w, self.v(H_all)).mean(dim=2)
        return AttentionOutput(u + self.Wg(k_avg)[None], w)
