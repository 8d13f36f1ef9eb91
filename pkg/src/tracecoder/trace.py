"""Evidence extraction for predictions and report rendering.

Every weight placed in a report is read straight out of the attention
tensors of one forward pass, so re-running the same checkpoint on the same
document reproduces it bit for bit.
"""

from __future__ import annotations

import html
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from tracecoder.corpus import Chunk, Document, Vocab, chunk_starts
from tracecoder.diversity import KnowledgeMatrices
from tracecoder.errors import ValidationError
from tracecoder.model import collate, document_chunks
from tracecoder.training import TrainResult

SCHEMA_VERSION = 1
SPAN_PERCENTILE = 90.0
SOURCE_COLORS = {"umls": "#c0392b", "wikipedia": "#1f5fbf", "llm": "#1e8449"}


@dataclass
class Prediction:
    doc_id: str
    scores: np.ndarray  # (L,)
    weights: dict[str, np.ndarray]  # lsa/lcca: (C, L, T); kcca: (L, M, C*T)
    mask: np.ndarray  # (C, T) bool
    chunk_starts: list[int]
    tokens: list[str]  # surface tokens after truncation


def predict(bundle: TrainResult, document: Document, vocab: Vocab | None = None) -> Prediction:
    """Eval-mode forward pass on one document, keeping every attention tensor."""
    if vocab is not None and vocab.fingerprint() != bundle.vocab.fingerprint():
        raise ValidationError(
            f"vocab hash mismatch: checkpoint {bundle.vocab.fingerprint()} vs {vocab.fingerprint()}")
    cfg = bundle.config
    chunks: list[Chunk] = document_chunks(document, bundle.vocab, cfg.chunk_size, cfg.max_length,
                                          cfg.chunk_stride)
    ids, mask = collate([chunks], bundle.vocab.pad_id)
    model = bundle.model
    model.eval()
    with torch.no_grad():
        out = model(ids, mask)
    tokens = document.text.split()[: cfg.max_length]
    return Prediction(
        doc_id=document.id,
        scores=out.probs[0].numpy(),
        weights={k: v.weights[0].numpy() for k, v in out.attention.items()},
        mask=mask[0].numpy(),
        chunk_starts=chunk_starts(len(tokens), cfg.chunk_size, cfg.chunk_stride),
        tokens=tokens,
    )


@dataclass
class TextEvidence:
    chunk_index: int
    start: int  # token positions within the chunk, [start, end)
    end: int
    text: str
    mechanism: str
    weight: float


@dataclass
class KnowledgeEvidence:
    row: int
    text: str
    source: str
    provenance: str
    weight: float
    overlap: list[str] = field(default_factory=list)


@dataclass
class CodeTrace:
    code: str
    description: str
    probability: float
    threshold: float
    text_evidence: list[TextEvidence]
    knowledge_evidence: list[KnowledgeEvidence]


@dataclass
class TraceReport:
    doc_id: str
    codes: list[CodeTrace]
    metadata: dict

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    @classmethod
    def from_json(cls, data: dict) -> "TraceReport":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported trace schema {data.get('schema_version')}")
        codes = [
            CodeTrace(
                **{k: v for k, v in c.items() if k not in ("text_evidence", "knowledge_evidence")},
                text_evidence=[TextEvidence(**t) for t in c["text_evidence"]],
                knowledge_evidence=[KnowledgeEvidence(**k) for k in c["knowledge_evidence"]],
            )
            for c in data["codes"]
        ]
        return cls(data["doc_id"], codes, data["metadata"])


def text_spans(weights: np.ndarray, mask: np.ndarray, tokens: Sequence[str],
               starts: Sequence[int], mechanism: str, top_k: int,
               percentile: float = SPAN_PERCENTILE) -> list[TextEvidence]:
    """Maximal runs of tokens weighted above the code's percentile, best first.

    ``weights`` and ``mask`` are (C, T) for one code. A span's weight is the
    largest token weight inside it.
    """
    valid = mask.astype(bool)
    vals = weights[valid]
    if vals.size == 0:
        return []
    cut = np.percentile(vals, percentile)
    hot = valid & (weights > cut)
    if not hot.any():  # flat distribution: fall back to the maxima
        hot = valid & (weights == vals.max())
    spans = []
    for c in range(weights.shape[0]):
        p, T = 0, weights.shape[1]
        while p < T:
            if not hot[c, p]:
                p += 1
                continue
            q = p
            while q < T and hot[c, q]:
                q += 1
            w = weights[c, p:q]
            off = starts[c]
            spans.append(TextEvidence(c, p, q, " ".join(tokens[off + p : off + q]), mechanism,
                                      float(w.max())))
            p = q
    spans.sort(key=lambda s: (-s.weight, s.chunk_index, s.start))
    return spans[:top_k]


def _span_positions(spans: Sequence[TextEvidence], starts_T: int) -> list[int]:
    pos = set()
    for s in spans:
        pos.update(s.chunk_index * starts_T + p for p in range(s.start, s.end))
    return sorted(pos)


def build_trace(pred: Prediction, bundle: TrainResult, km: KnowledgeMatrices,
                threshold: float | Sequence[float] | None = None, top_k_spans: int = 3,
                top_k_knowledge: int = 8) -> TraceReport:
    """Collect text and knowledge evidence for every code scored at or above threshold.

    Knowledge rows are ranked by the KCCA weight they place on the positions
    covered by the code's text evidence spans.
    """
    ls = bundle.label_space
    threshold = bundle.threshold if threshold is None else threshold
    thr = np.broadcast_to(np.asarray(threshold, dtype=np.float64), (len(ls),))
    T = pred.mask.shape[1]
    codes = []
    for l, code in enumerate(ls.codes):
        prob = float(pred.scores[l])
        if prob < thr[l]:
            continue
        text_ev: list[TextEvidence] = []
        for mech in ("lsa", "lcca"):
            if mech in pred.weights:
                text_ev += text_spans(pred.weights[mech][:, l, :], pred.mask, pred.tokens,
                                      pred.chunk_starts, mech, top_k_spans)
        text_ev.sort(key=lambda s: (-s.weight, s.mechanism, s.chunk_index, s.start))

        know_ev: list[KnowledgeEvidence] = []
        if "kcca" in pred.weights:
            w = pred.weights["kcca"][l]  # (M, C*T)
            positions = _span_positions(text_ev, T) or list(np.flatnonzero(pred.mask.ravel()))
            span_words = {t.lower() for s in text_ev for t in s.text.split()}
            for row, entry in enumerate(km[code].entries):
                overlap = sorted(span_words & {t.lower() for t in entry.text.split()})
                know_ev.append(KnowledgeEvidence(row, entry.text, entry.source, entry.provenance,
                                                 float(w[row, positions].sum()), overlap))
            know_ev.sort(key=lambda k: (-k.weight, k.row))
            know_ev = know_ev[:top_k_knowledge]
        codes.append(CodeTrace(code, ls.descriptions[code], prob, float(thr[l]), text_ev, know_ev))
    codes.sort(key=lambda c: -c.probability)
    meta = {
        "config_hash": bundle.config_hash,
        "km_hash": km.config_hash,
        "n_chunks": int(pred.mask.shape[0]),
        "chunk_size": T,
        "threshold": threshold if np.ndim(threshold) else float(threshold),
        "top_k_spans": top_k_spans,
        "top_k_knowledge": top_k_knowledge,
        "span_percentile": SPAN_PERCENTILE,
        "n_predicted": len(codes),
    }
    return TraceReport(pred.doc_id, codes, meta)


# -- rendering -------------------------------------------------------------------

def _highlight_overlap(text: str, overlap: Sequence[str]) -> str:
    keep = set(overlap)
    return " ".join(f"<b><u>{html.escape(t)}</u></b>" if t.lower() in keep else html.escape(t)
                    for t in text.split())


def render_html(trace: TraceReport, document_text: str | None = None) -> str:
    out = [
        "<!DOCTYPE html>",
        '<html><head><meta charset="utf-8">',
        f"<title>Trace for {html.escape(trace.doc_id)}</title>",
        "<style>body{font-family:sans-serif;max-width:60em;margin:auto}"
        "mark.lsa{background:#ffe08a}mark.lcca{background:#b8f0d0}"
        + "".join(f"li.{s}{{color:{c}}}" for s, c in SOURCE_COLORS.items())
        + "</style></head><body>",
        f"<h1>Document {html.escape(trace.doc_id)}</h1>",
        "<p class=legend>Knowledge sources: "
        + ", ".join(f'<span style="color:{c}">{s}</span>' for s, c in SOURCE_COLORS.items())
        + "</p>",
    ]
    if document_text is not None:
        out.append(f"<pre class=note>{html.escape(document_text)}</pre>")
    if not trace.codes:
        out.append("<p>No code reached the decision threshold.</p>")
    for c in trace.codes:
        out.append(f'<section class=code id="{html.escape(c.code)}">')
        out.append(f"<h2>{html.escape(c.code)}: {html.escape(c.description)}</h2>")
        out.append(f"<p>probability {c.probability:.4f} (threshold {c.threshold:.2f})</p>")
        out.append("<h3>Text evidence</h3><ol>")
        for s in c.text_evidence:
            out.append(f'<li><mark class="{s.mechanism}" title="weight {s.weight:.6g}">'
                       f"{html.escape(s.text)}</mark> <small>{s.mechanism}, chunk {s.chunk_index},"
                       f" tokens {s.start}-{s.end}</small></li>")
        out.append("</ol><h3>Knowledge evidence</h3><ul>")
        for k in c.knowledge_evidence:
            out.append(f'<li class="{html.escape(k.source)}">{_highlight_overlap(k.text, k.overlap)}'
                       f" <small>[{k.source}, weight {k.weight:.6g}]</small></li>")
        out.append("</ul></section>")
    out.append("</body></html>")
    return "\n".join(out) + "\n"


def render_report(trace: TraceReport, fmt: str, path, document_text: str | None = None) -> Path:
    """Write ``trace`` as ``structured`` JSON or a ``readable`` static HTML page."""
    path = Path(path)
    if fmt == "structured":
        payload = json.dumps(trace.to_json(), indent=2, sort_keys=True) + "\n"
    elif fmt == "readable":
        payload = render_html(trace, document_text)
    else:
        raise ValidationError(f"unknown report format {fmt!r} (use structured or readable)")
    try:
        path.write_text(payload, encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot write report to {path}: {e}") from e
    return path


def read_report(path) -> TraceReport:
    return TraceReport.from_json(json.loads(Path(path).read_text(encoding="utf-8")))
