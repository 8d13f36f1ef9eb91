"""Diversity-based knowledge selection (Maximum Diversity Problem).

For every code, candidate entries are embedded, pairwise cosine distances
computed, and the ``M`` entries with the largest total pairwise distance are
kept. Small instances are solved exactly, large ones greedily.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from tracecoder.errors import ConfigError, EncoderError, ValidationError
from tracecoder.knowledge import KnowledgeBase, KnowledgeEntry

logger = logging.getLogger(__name__)

EXACT_CAP = 16
_TIE_TOL = 1e-12
FORMAT_VERSION = 1


class TextEncoder(Protocol):
    id: str

    def encode(self, texts: Sequence[str]) -> np.ndarray: ...


@dataclass(frozen=True)
class EntryEmbedding:
    entry: KnowledgeEntry
    vector: np.ndarray


def embed_entries(entries: Sequence[KnowledgeEntry], encoder: TextEncoder,
                  batch_size: int = 64) -> list[EntryEmbedding]:
    out = []
    for i in range(0, len(entries), batch_size):
        batch = entries[i : i + batch_size]
        try:
            vecs = np.asarray(encoder.encode([e.text for e in batch]), dtype=np.float64)
        except Exception as exc:
            # re-run one by one to name the entry that broke the encoder
            for e in batch:
                try:
                    encoder.encode([e.text])
                except Exception:
                    raise EncoderError(f"encoder failed on entry {e.key()!r}: {exc}") from exc
            raise EncoderError(f"encoder failed on batch starting at entry {i}: {exc}") from exc
        bad = ~np.isfinite(vecs).all(axis=1)
        if bad.any():
            raise EncoderError(f"non-finite embedding for entry {batch[int(np.argmax(bad))].key()!r}")
        out.extend(EntryEmbedding(e, v) for e, v in zip(batch, vecs))
    return out


def dissimilarity(a, b) -> float:
    """Cosine distance ``1 - cos(a, b)``, in [0, 2]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine dissimilarity is undefined for a zero-norm vector")
    cos = float(np.dot(a, b) / (na * nb))
    return 1.0 - min(1.0, max(-1.0, cos))


def dissimilarity_matrix(vectors) -> np.ndarray:
    X = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    if (norms == 0).any():
        raise ValueError(f"zero-norm embedding at row {int(np.argmax(norms == 0))}")
    U = X / norms[:, None]
    D = 1.0 - np.clip(U @ U.T, -1.0, 1.0)
    D = (D + D.T) / 2
    np.fill_diagonal(D, 0.0)
    return D


def objective(D, subset) -> float:
    idx = list(subset)
    return float(sum(D[i][j] for a, i in enumerate(idx) for j in idx[a + 1 :]))


def _check_square(D):
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValueError(f"dissimilarity matrix must be square, got {D.shape}")
    return D


def solve_mdp_exact(D, M: int, cap: int = EXACT_CAP) -> tuple[int, ...]:
    """Exhaustive search; ties go to the lexicographically smallest index set."""
    D = _check_square(D)
    N = D.shape[0]
    if M < 1:
        raise ConfigError("M must be >= 1")
    if N > cap:
        raise ConfigError(f"N={N} exceeds the exact-solver cap of {cap}; use solve_mdp_greedy")
    if M >= N:
        return tuple(range(N))
    if M == 1:
        return (0,)
    combos = np.array(list(combinations(range(N), M)), dtype=np.intp)  # lexicographic order
    scores = D[combos[:, :, None], combos[:, None, :]].sum(axis=(1, 2)) / 2
    best = scores.max()
    first = int(np.argmax(scores >= best - _TIE_TOL * max(1.0, abs(best))))
    return tuple(int(i) for i in combos[first])


def solve_mdp_greedy(D, M: int) -> tuple[int, ...]:
    """Seed with the most distant pair, then add the farthest index in turn."""
    D = _check_square(D)
    N = D.shape[0]
    if M < 1:
        raise ConfigError("M must be >= 1")
    if M >= N:
        return tuple(range(N))
    if M == 1:
        return (0,)
    iu, ju = np.triu_indices(N, k=1)  # row-major: lexicographic pair order
    k = int(np.argmax(D[iu, ju]))
    chosen = [int(iu[k]), int(ju[k])]
    gain = D[chosen[0]] + D[chosen[1]]
    while len(chosen) < M:
        g = gain.copy()
        g[chosen] = -np.inf
        nxt = int(np.argmax(g))
        chosen.append(nxt)
        gain = gain + D[nxt]
    return tuple(sorted(chosen))


def select(vectors, M: int, cap: int = EXACT_CAP) -> tuple[int, ...]:
    n = len(vectors)
    if n == 0:
        raise ValidationError("no candidates to select from")
    if n == 1:
        return (0,)
    D = dissimilarity_matrix(vectors)
    return solve_mdp_exact(D, M, cap) if n <= cap else solve_mdp_greedy(D, M)


@dataclass
class KnowledgeMatrix:
    code: str
    entries: tuple[KnowledgeEntry, ...]  # selected entries, one per row (cyclically repeated)
    entry_ids: tuple[int, ...]  # candidate index of each row
    matrix: np.ndarray  # (M, d)
    avg: np.ndarray  # (d,)


def cyclic_rows(selected: Sequence[int], M: int) -> list[int]:
    return [selected[i % len(selected)] for i in range(M)]


def config_hash(M: int, sources: Sequence[str], encoder_id: str) -> str:
    payload = json.dumps({"M": M, "sources": sorted(sources), "encoder": encoder_id},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class KnowledgeMatrices:
    codes: tuple[str, ...]
    per_code: dict[str, KnowledgeMatrix]
    M: int
    config_hash: str

    def __getitem__(self, code) -> KnowledgeMatrix:
        return self.per_code[code]

    @property
    def dim(self) -> int:
        return self.per_code[self.codes[0]].matrix.shape[1]

    def stacked(self, codes: Sequence[str] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """``(K_best, K_avg)`` of shapes (L_n, M, d) and (L_n, d), rows in ``codes`` order."""
        codes = self.codes if codes is None else codes
        missing = [c for c in codes if c not in self.per_code]
        if missing:
            raise ValidationError(f"knowledge matrix lacks codes: {missing}")
        return (np.stack([self.per_code[c].matrix for c in codes]),
                np.stack([self.per_code[c].avg for c in codes]))

    def save(self, path):
        meta = {
            "version": FORMAT_VERSION, "M": self.M, "config_hash": self.config_hash,
            "codes": list(self.codes),
            "entries": {c: {"entry_ids": list(km.entry_ids),
                            "entries": [e.to_json() for e in km.entries]}
                        for c, km in self.per_code.items()},
        }
        arrays = {"meta": np.array(json.dumps(meta, sort_keys=True))}
        for i, c in enumerate(self.codes):
            arrays[f"matrix_{i}"] = self.per_code[c].matrix
            arrays[f"avg_{i}"] = self.per_code[c].avg
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path, expected_hash: str | None = None) -> "KnowledgeMatrices":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("version") != FORMAT_VERSION:
                raise ValidationError(f"unsupported knowledge-matrix version {meta.get('version')}")
            if expected_hash is not None and meta["config_hash"] != expected_hash:
                raise ValidationError(
                    f"knowledge-matrix config hash {meta['config_hash']} does not match "
                    f"expected {expected_hash}"
                )
            per_code = {}
            for i, c in enumerate(meta["codes"]):
                info = meta["entries"][c]
                per_code[c] = KnowledgeMatrix(
                    code=c,
                    entries=tuple(KnowledgeEntry(**e) for e in info["entries"]),
                    entry_ids=tuple(info["entry_ids"]),
                    matrix=z[f"matrix_{i}"].copy(),
                    avg=z[f"avg_{i}"].copy(),
                )
        return cls(tuple(meta["codes"]), per_code, meta["M"], meta["config_hash"])


def build_knowledge_matrix(kb: KnowledgeBase, encoder: TextEncoder, M: int,
                           cap: int = EXACT_CAP) -> KnowledgeMatrices:
    if M < 1:
        raise ConfigError("M must be >= 1")
    per_code: dict[str, KnowledgeMatrix] = {}
    for code in kb.label_space.codes:
        cands = kb.candidates(code)
        embs = embed_entries(cands, encoder)
        vecs = np.stack([e.vector for e in embs])
        try:
            chosen = select(vecs, M, cap)
        except ValueError as e:
            raise EncoderError(f"{code}: {e}") from e
        rows = cyclic_rows(chosen, M)
        mat = vecs[rows]
        per_code[code] = KnowledgeMatrix(code, tuple(cands[i] for i in rows), tuple(rows),
                                         mat, mat.mean(axis=0))
    return KnowledgeMatrices(tuple(kb.label_space.codes), per_code, M,
                             config_hash(M, kb.sources, encoder.id))
