"""Documents, label spaces, vocabulary and chunking.

Data files are JSON lines:

* corpus:  ``{"id": str, "text": str, "codes": [str]}``
* labels:  ``{"code": str, "description": str}`` (line order is index order)
* splits:  ``{"id": str, "split": "train" | "dev" | "test"}``
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from tracecoder.errors import ConfigError, ParseError, ValidationError

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
PAD, UNK, CLS = "[PAD]", "[UNK]", "[CLS]"


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    codes: frozenset[str]

    def to_json(self) -> dict:
        return {"id": self.id, "text": self.text, "codes": sorted(self.codes)}


@dataclass(frozen=True)
class LabelSpace:
    """Ordered code list. Row ``i`` of every label-indexed matrix is ``codes[i]``."""

    codes: tuple[str, ...]
    descriptions: Mapping[str, str]

    def __post_init__(self):
        if len(set(self.codes)) != len(self.codes):
            dupes = sorted(c for c, n in Counter(self.codes).items() if n > 1)
            raise ValidationError(f"duplicate codes in label space: {dupes}")
        missing = [c for c in self.codes if not str(self.descriptions.get(c, "")).strip()]
        if missing:
            raise ValidationError(f"codes without a description: {missing}")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.codes)})

    def __len__(self):
        return len(self.codes)

    def __contains__(self, code):
        return code in self._index

    def index(self, code: str) -> int:
        return self._index[code]

    def multi_hot(self, codes: Iterable[str]) -> list[int]:
        row = [0] * len(self.codes)
        for c in codes:
            row[self._index[c]] = 1
        return row

    def fingerprint(self) -> str:
        payload = json.dumps([[c, self.descriptions[c]] for c in self.codes])
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for c in self.codes:
                fh.write(json.dumps({"code": c, "description": self.descriptions[c]}) + "\n")

    def to_records(self) -> list[dict]:
        return [{"code": c, "description": self.descriptions[c]} for c in self.codes]

    @classmethod
    def from_records(cls, records: Sequence[Mapping]) -> "LabelSpace":
        return cls(
            codes=tuple(r["code"] for r in records),
            descriptions={r["code"]: r["description"] for r in records},
        )


@dataclass(frozen=True)
class Corpus:
    documents: tuple[Document, ...]
    label_space: LabelSpace

    def __len__(self):
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)

    @property
    def ids(self) -> list[str]:
        return [d.id for d in self.documents]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for d in self.documents:
                fh.write(json.dumps(d.to_json()) + "\n")


@dataclass(frozen=True)
class Chunk:
    doc_id: str
    index: int
    token_ids: tuple[int, ...]
    attention_mask: tuple[int, ...]


@dataclass
class Vocab:
    """Dense token→id map. Ids 0, 1, 2 are pad, unknown and cls."""

    tokens: list[str] = field(default_factory=lambda: [PAD, UNK, CLS])

    def __post_init__(self):
        if self.tokens[:3] != [PAD, UNK, CLS]:
            raise ValidationError("vocab must start with the [PAD], [UNK], [CLS] specials")
        self.stoi = {t: i for i, t in enumerate(self.tokens)}
        if len(self.stoi) != len(self.tokens):
            raise ValidationError("duplicate tokens in vocab")

    pad_id = 0
    unk_id = 1
    cls_id = 2

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.stoi

    def __getitem__(self, token) -> int:
        return self.stoi.get(token, self.unk_id)

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode()).hexdigest()[:16]

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def _read_jsonl(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(path, line_no, f"invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise ParseError(path, line_no, "record is not an object")
            yield line_no, rec


def load_label_space(path) -> LabelSpace:
    records = []
    for line_no, rec in _read_jsonl(path):
        if not isinstance(rec.get("code"), str) or not isinstance(rec.get("description"), str):
            raise ParseError(path, line_no, "expected string fields 'code' and 'description'")
        records.append(rec)
    return LabelSpace.from_records(records)


def load_corpus(path, label_space: LabelSpace | None = None) -> Corpus:
    """Read a corpus file.

    Without ``label_space`` one is derived from the codes seen (sorted, with the
    code itself as description). With one, every code must belong to it.
    """
    docs: list[Document] = []
    seen: set[str] = set()
    for line_no, rec in _read_jsonl(path):
        doc_id, text, codes = rec.get("id"), rec.get("text"), rec.get("codes")
        if not isinstance(doc_id, str) or not isinstance(text, str):
            raise ParseError(path, line_no, "expected string fields 'id' and 'text'")
        if not isinstance(codes, list) or not all(isinstance(c, str) for c in codes):
            raise ParseError(path, line_no, "'codes' must be a list of strings")
        if doc_id in seen:
            raise ValidationError(f"duplicate document id {doc_id!r} (line {line_no})")
        seen.add(doc_id)
        docs.append(Document(doc_id, text, frozenset(codes)))

    if label_space is None:
        codes = sorted({c for d in docs for c in d.codes})
        label_space = LabelSpace(tuple(codes), {c: c for c in codes})
    else:
        unknown = sorted({c for d in docs for c in d.codes if c not in label_space})
        if unknown:
            raise ValidationError(f"codes outside the label space: {unknown}")
    return Corpus(tuple(docs), label_space)


def whitespace_tokens(text: str) -> list[str]:
    return text.lower().split()


def build_vocab(corpus: Corpus | Iterable[Document], min_freq: int = 1) -> Vocab:
    if min_freq < 1:
        raise ConfigError("min_freq must be >= 1")
    docs = list(corpus)
    if not docs:
        raise ValidationError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for d in docs for tok in whitespace_tokens(d.text))
    # sorted for a stable id assignment independent of document order
    kept = sorted(t for t, n in counts.items() if n >= min_freq and t not in (PAD, UNK, CLS))
    return Vocab([PAD, UNK, CLS] + kept)


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return [vocab[t] for t in whitespace_tokens(text)]


def chunk(
    token_ids: Sequence[int],
    chunk_size: int = 512,
    max_length: int = 5120,
    *,
    doc_id: str = "",
    pad_id: int = Vocab.pad_id,
    stride: int | None = None,
) -> list[Chunk]:
    """Truncate to ``max_length`` and cut into windows of ``chunk_size``.

    ``stride`` defaults to ``chunk_size`` (non-overlapping windows). An empty
    sequence yields a single all-padding chunk.
    """
    if chunk_size <= 0:
        raise ConfigError("chunk_size must be positive")
    if max_length <= 0 or max_length % chunk_size:
        raise ConfigError(
            f"max_length ({max_length}) must be a positive multiple of chunk_size ({chunk_size})"
        )
    stride = chunk_size if stride is None else stride
    if not 0 < stride <= chunk_size:
        raise ConfigError("stride must be in (0, chunk_size]")

    ids = list(token_ids[:max_length])
    starts = chunk_starts(len(ids), chunk_size, stride)

    out = []
    for i, s in enumerate(starts):
        window = ids[s : s + chunk_size]
        n_pad = chunk_size - len(window)
        out.append(
            Chunk(
                doc_id=doc_id,
                index=i,
                token_ids=tuple(window) + (pad_id,) * n_pad,
                attention_mask=(1,) * len(window) + (0,) * n_pad,
            )
        )
    return out


def chunk_starts(n_tokens: int, chunk_size: int, stride: int | None = None) -> list[int]:
    """Start offsets of the windows :func:`chunk` produces for ``n_tokens`` (already truncated)."""
    stride = chunk_size if stride is None else stride
    if stride == chunk_size:
        return list(range(0, max(n_tokens, 1), chunk_size))
    last = max(n_tokens - chunk_size, 0)
    starts = list(range(0, last + 1, stride))
    if starts[-1] < last:
        starts.append(last)
    return starts


def max_chunks(max_length: int, chunk_size: int) -> int:
    return math.ceil(max_length / chunk_size)


def split(corpus: Corpus, assignment: Mapping[str, str]) -> dict[str, Corpus]:
    """Partition ``corpus`` into train/dev/test according to ``assignment``."""
    ids = set(corpus.ids)
    unassigned = sorted(ids - set(assignment))
    if unassigned:
        raise ValidationError(f"documents without a split assignment: {unassigned}")
    unknown = sorted(set(assignment) - ids)
    if unknown:
        raise ValidationError(f"split assignment names unknown documents: {unknown}")
    bad = sorted({s for s in assignment.values() if s not in SPLITS})
    if bad:
        raise ValidationError(f"unknown split names: {bad}")

    parts = {
        name: Corpus(
            tuple(d for d in corpus if assignment[d.id] == name), corpus.label_space
        )
        for name in SPLITS
    }
    for name in ("dev", "test"):
        if not parts[name].documents:
            logger.warning("split %r is empty", name)
    return parts


def load_splits(path) -> dict[str, str]:
    out = {}
    for line_no, rec in _read_jsonl(path):
        if not isinstance(rec.get("id"), str) or rec.get("split") not in SPLITS:
            raise ParseError(path, line_no, "expected {'id': str, 'split': train|dev|test}")
        out[rec["id"]] = rec["split"]
    return out


def save_splits(assignment: Mapping[str, str], path):
    with open(path, "w", encoding="utf-8") as fh:
        for doc_id, s in assignment.items():
            fh.write(json.dumps({"id": doc_id, "split": s}) + "\n")
