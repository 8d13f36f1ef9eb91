"""Deterministic synthetic corpora with knowledge that aligns with the text.

Label ``l`` owns a disjoint block of ``signature_size`` tokens. A document
carrying ``l`` contains every one of them (plus up to two repeats); no other
document contains any of them. Filler words follow a Zipf distribution.
Every knowledge source describes ``l`` using its signature tokens, so
knowledge and text genuinely overlap.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path

from tracecoder.corpus import Corpus, Document, LabelSpace, save_splits
from tracecoder.errors import ConfigError
from tracecoder.knowledge import DEFAULT_PROMPT_TEMPLATE, LLMClient, WikipediaClient

SYNTHETIC_LLM_MODEL = "synthetic-llm"


@dataclass
class SyntheticData:
    corpus: Corpus
    splits: dict[str, str]
    signatures: dict[str, list[str]]
    synonyms: dict[str, list[str]]
    wiki_titles: dict[str, str]
    wiki_extracts: dict[str, str]
    llm_responses: dict[str, str]

    def signature_lookup(self, text: str) -> set[str]:
        """Recover a document's codes purely from its tokens."""
        owner = {t: c for c, toks in self.signatures.items() for t in toks}
        return {owner[t] for t in text.lower().split() if t in owner}


def generate_synthetic(n_docs: int, n_labels: int, vocab_size: int, seed: int,
                       signature_size: int = 3, min_noise: int = 20,
                       max_noise: int = 60, max_labels_per_doc: int = 3,
                       zipf_exponent: float = 1.0) -> SyntheticData:
    if min(n_docs, n_labels, vocab_size) < 1:
        raise ConfigError("n_docs, n_labels and vocab_size must all be >= 1")
    if signature_size < 3:
        raise ConfigError("signature_size must be >= 3")
    if n_labels * signature_size > vocab_size:
        raise ConfigError(
            f"{n_labels} labels x {signature_size} signature tokens exceeds vocab_size={vocab_size}"
        )
    rng = random.Random(seed)
    words = [f"w{i:04d}" for i in range(vocab_size)]
    codes = [f"S{i:03d}" for i in range(n_labels)]
    signatures = {c: words[i * signature_size : (i + 1) * signature_size]
                  for i, c in enumerate(codes)}
    noise = words[n_labels * signature_size :]
    zipf = [1.0 / (r + 1) ** zipf_exponent for r in range(len(noise))]

    descriptions = {c: f"condition {sig[0]} {sig[1]}" for c, sig in signatures.items()}
    label_space = LabelSpace(tuple(codes), descriptions)

    docs = []
    for i in range(n_docs):
        labels = {codes[i % n_labels]}
        extra = rng.randint(0, max_labels_per_doc - 1)
        labels |= set(rng.sample(codes, min(extra, n_labels)))
        tokens = []
        for c in sorted(labels):
            tokens += signatures[c] + [rng.choice(signatures[c]) for _ in range(rng.randint(0, 2))]
        if noise:
            tokens += rng.choices(noise, weights=zipf, k=rng.randint(min_noise, max_noise))
        rng.shuffle(tokens)
        docs.append(Document(f"doc{i:04d}", " ".join(tokens), frozenset(labels)))
    corpus = Corpus(tuple(docs), label_space)

    order = list(range(n_docs))
    rng.shuffle(order)
    n_held = round(0.15 * n_docs) if n_docs >= 3 else 0
    splits = {}
    for rank, i in enumerate(order):
        splits[docs[i].id] = "dev" if rank < n_held else "test" if rank < 2 * n_held else "train"
    splits = {d.id: splits[d.id] for d in docs}

    synonyms, wiki_titles, wiki_extracts, llm_responses = {}, {}, {}, {}
    for c, sig in signatures.items():
        s = rng.sample(sig, len(sig))
        synonyms[c] = [f"{s[0]}, {s[1]}", f"{s[2]} and {s[0]} ({s[1]})", f"{s[1]} {s[2]} & {s[0]}"]
        wiki_titles[c] = f"Synthetic condition {c}"
        wiki_extracts[c] = (f"{s[0]} {s[1]} is a disorder of the {s[2]} type. "
                            f"It commonly presents with {s[1]} and {s[0]}. "
                            f"Diagnosis relies on {s[2]} findings.")
        llm_responses[c] = (f"{s[2]} {s[0]} is the clinical definition. "
                            f"Typical symptoms include {s[1]}. "
                            f"Laboratory findings show elevated {s[0]} {s[2]}.")
    return SyntheticData(corpus, splits, signatures, synonyms, wiki_titles,
                         wiki_extracts, llm_responses)


def write_synthetic(data: SyntheticData, out_dir, template: str = DEFAULT_PROMPT_TEMPLATE,
                    llm_model: str = SYNTHETIC_LLM_MODEL) -> dict[str, Path]:
    """Write corpus, labels, splits, knowledge inputs and warm client caches."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": out / "corpus.jsonl",
        "labels": out / "labels.jsonl",
        "splits": out / "splits.jsonl",
        "synonyms": out / "synonyms.jsonl",
        "wiki_titles": out / "wiki_titles.jsonl",
        "knowledge": out / "knowledge.jsonl",
        "signatures": out / "signatures.json",
        "wiki_cache": out / "cache" / "wikipedia",
        "llm_cache": out / "cache" / "llm",
    }
    data.corpus.save(paths["corpus"])
    data.corpus.label_space.save(paths["labels"])
    save_splits(data.splits, paths["splits"])
    codes = data.corpus.label_space.codes
    with open(paths["synonyms"], "w", encoding="utf-8") as fh:
        for c in codes:
            fh.write(json.dumps({"code": c, "synonyms": data.synonyms[c]}) + "\n")
    with open(paths["wiki_titles"], "w", encoding="utf-8") as fh:
        for c in codes:
            fh.write(json.dumps({"code": c, "title": data.wiki_titles[c]}) + "\n")
    with open(paths["knowledge"], "w", encoding="utf-8") as fh:
        for c in codes:
            for source, texts in (("umls", data.synonyms[c]),
                                  ("wikipedia", [data.wiki_extracts[c]]),
                                  ("llm", [data.llm_responses[c]])):
                for t in texts:
                    fh.write(json.dumps({"code": c, "source": source, "text": t,
                                         "provenance": "synthetic"}) + "\n")
    paths["signatures"].write_text(json.dumps(data.signatures, indent=1, sort_keys=True))

    wiki = WikipediaClient(paths["wiki_cache"], offline=True)
    llm = LLMClient(paths["llm_cache"], model=llm_model, offline=True)
    for c in codes:
        wiki.seed(data.wiki_titles[c], data.wiki_extracts[c])
        llm.seed(c, template, data.llm_responses[c])
    return paths
