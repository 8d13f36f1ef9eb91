"""Per-code knowledge ingestion from UMLS synonym files, Wikipedia and an LLM.

Both remote clients write every response to an on-disk cache before using
it, and read the cache before touching the network, so a warm cache makes
:func:`build_kb` deterministic and offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from urllib.parse import quote

from tracecoder.corpus import LabelSpace, _read_jsonl
from tracecoder.errors import ConfigError, FetchError, ParseError

logger = logging.getLogger(__name__)

SOURCES = ("umls", "wikipedia", "llm")
FALLBACK_PROVENANCE = "label-description"
MAX_ENTRY_TOKENS = 64

DEFAULT_PROMPT_TEMPLATE = (
    "List the clinical definition, typical symptoms, and characteristic laboratory "
    "findings for ICD code {code} ({description}). Answer in short factual sentences."
)
DEFAULT_WIKI_ENDPOINT = "https://en.wikipedia.org/api/rest_v1/page/summary/{title}"

_CONJUNCTIONS = {"and", "or"}
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")


@dataclass(frozen=True, order=True)
class KnowledgeEntry:
    code: str
    source: str
    text: str
    provenance: str = field(default="", compare=False)

    def key(self) -> tuple[str, str, str]:
        return (self.code, self.source, self.text)

    def to_json(self) -> dict:
        return {"code": self.code, "source": self.source, "text": self.text,
                "provenance": self.provenance}


@dataclass(frozen=True)
class KnowledgeBase:
    """Candidate entries per code, canonically sorted by (code, source, text)."""

    label_space: LabelSpace
    entries: Mapping[str, tuple[KnowledgeEntry, ...]]
    sources: tuple[str, ...] = SOURCES

    def candidates(self, code: str) -> tuple[KnowledgeEntry, ...]:
        return self.entries[code]

    def all_entries(self) -> list[KnowledgeEntry]:
        return [e for c in self.label_space.codes for e in self.entries[c]]

    def counts(self) -> dict[str, dict[str, int]]:
        """Per-code per-source entry counts (fallback entries counted separately)."""
        out = {}
        for code in self.label_space.codes:
            cnt = Counter(
                "fallback" if e.provenance == FALLBACK_PROVENANCE else e.source
                for e in self.entries[code]
            )
            out[code] = {s: cnt.get(s, 0) for s in (*SOURCES, "fallback")}
        return out

    def source_totals(self) -> dict[str, int]:
        tot = Counter()
        for per_code in self.counts().values():
            tot.update(per_code)
        return {s: tot.get(s, 0) for s in (*SOURCES, "fallback")}

    def availability(self) -> dict[str, dict[str, bool]]:
        return {c: {s: n > 0 for s, n in per.items() if s in SOURCES}
                for c, per in self.counts().items()}

    def export(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for e in self.all_entries():
                fh.write(json.dumps(e.to_json()) + "\n")

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for e in self.all_entries():
            h.update(json.dumps(e.key()).encode())
        return h.hexdigest()[:16]

    @classmethod
    def load(cls, path, label_space: LabelSpace, sources: Sequence[str] = SOURCES):
        entries = []
        for line_no, rec in _read_jsonl(path):
            try:
                entries.append(KnowledgeEntry(rec["code"], rec["source"], rec["text"],
                                              rec.get("provenance", "")))
            except KeyError as e:
                raise ParseError(path, line_no, f"missing field {e}") from None
        return _assemble(label_space, entries, tuple(sources))


def preprocess_synonym(text: str) -> str | None:
    """Keep letters, digits, spaces, hyphens and parentheses; drop "and"/"or".

    Returns ``None`` when nothing survives, meaning the entry is dropped.
    """
    kept = "".join(
        ch if (ch.isalnum() or ch in "-()") else (" " if ch.isspace() else "")
        for ch in text
    )
    tokens = [t for t in kept.split() if t.lower() not in _CONJUNCTIONS]
    return " ".join(tokens) or None


def split_sentences(text: str, max_tokens: int = MAX_ENTRY_TOKENS) -> list[str]:
    """Split prose into sentence entries, trailing punctuation removed.

    Sentences longer than ``max_tokens`` whitespace tokens are cut into
    consecutive pieces.
    """
    out = []
    for sent in _SENTENCE_END.split(text.strip()):
        sent = " ".join(sent.split()).rstrip(".!?").strip()
        if not sent:
            continue
        toks = sent.split()
        for i in range(0, len(toks), max_tokens):
            out.append(" ".join(toks[i : i + max_tokens]))
    return out


def load_umls_synonyms(path, label_space: LabelSpace) -> tuple[list[KnowledgeEntry], int]:
    """Read ``{"code", "synonyms"}`` lines. Returns ``(entries, n_skipped_codes)``."""
    entries, skipped = [], 0
    prov = f"umls:{Path(path).name}"
    for line_no, rec in _read_jsonl(path):
        code, syns = rec.get("code"), rec.get("synonyms")
        if not isinstance(code, str) or not isinstance(syns, list):
            raise ParseError(path, line_no, "expected {'code': str, 'synonyms': [str]}")
        if code not in label_space:
            logger.warning("synonym file %s: code %r not in label space, skipped", path, code)
            skipped += 1
            continue
        for raw in syns:
            text = preprocess_synonym(str(raw))
            if text is not None:
                entries.append(KnowledgeEntry(code, "umls", text, prov))
    return entries, skipped


# -- on-disk cache -----------------------------------------------------------

class DiskCache:
    """One JSON file per key; writes are atomic and serialized per key."""

    def __init__(self, root):
        self.root = Path(root)
        self._locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._guard = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.root / (hashlib.sha256(key.encode()).hexdigest()[:32] + ".json")

    def get(self, key: str) -> dict | None:
        p = self._path(key)
        if not p.exists():
            return None
        return json.loads(p.read_text(encoding="utf-8"))

    def put(self, key: str, record: dict):
        with self._guard:
            lock = self._locks[key]
        with lock:
            self.root.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump({"key": key, **record}, fh, sort_keys=True, indent=1)
            os.replace(tmp, self._path(key))


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _default_session():
    import requests

    return requests.Session()


def _with_retries(call, retries: int, backoff_s: float):
    last = None
    for attempt in range(retries + 1):
        try:
            return call()
        except Exception as e:  # transport errors vary by client library
            last = e
            if attempt < retries and backoff_s:
                time.sleep(backoff_s * 2**attempt)
    raise last


# -- Wikipedia ----------------------------------------------------------------

class WikipediaClient:
    """Fetches page summaries through a REST endpoint, caching by title.

    ``session`` is anything with a ``get(url, timeout=...)`` method returning a
    response with ``status_code`` and ``json()``. With ``offline=True`` a cache
    miss is an error instead of a network call.
    """

    def __init__(self, cache_dir, endpoint: str = DEFAULT_WIKI_ENDPOINT, timeout_s: float = 10.0,
                 retries: int = 2, concurrency: int = 4, session=None, offline: bool = False,
                 backoff_s: float = 0.5):
        self.cache = DiskCache(cache_dir)
        self.endpoint = endpoint
        self.timeout_s = timeout_s
        self.retries = retries
        self.concurrency = max(1, concurrency)
        self.session = session
        self.offline = offline
        self.backoff_s = backoff_s
        self.misses: list[str] = []
        self.network_calls = 0

    @staticmethod
    def cache_key(title: str) -> str:
        return f"wikipedia/{title}"

    def url(self, title: str) -> str:
        return self.endpoint.format(title=quote(title.replace(" ", "_"), safe=""))

    def summary(self, title: str, code: str = "") -> dict:
        key = self.cache_key(title)
        hit = self.cache.get(key)
        if hit is not None:
            return hit
        if self.offline:
            raise FetchError(code, title, f"{code}: no cached Wikipedia page for {title!r} (offline)")
        if self.session is None:
            self.session = _default_session()
        url = self.url(title)

        def call():
            self.network_calls += 1
            resp = self.session.get(url, timeout=self.timeout_s)
            if resp.status_code == 404:
                return {"status": 404, "extract": ""}
            if resp.status_code >= 400:
                raise IOError(f"HTTP {resp.status_code}")
            return {"status": resp.status_code, "extract": resp.json().get("extract", "")}

        try:
            result = _with_retries(call, self.retries, self.backoff_s)
        except Exception as e:
            raise FetchError(code, title,
                             f"{code}: Wikipedia fetch for {title!r} failed after "
                             f"{self.retries + 1} attempts: {e}") from e
        record = {"title": title, "url": url, "fetched_at": _now(), **result}
        self.cache.put(key, record)
        return record

    def seed(self, title: str, extract: str, status: int = 200, fetched_at: str = "seeded"):
        """Write a cache record directly (used for offline corpora)."""
        self.cache.put(self.cache_key(title), {"title": title, "url": self.url(title),
                                               "fetched_at": fetched_at, "status": status,
                                               "extract": extract})


def fetch_wikipedia(code: str, title: str, client: WikipediaClient) -> list[KnowledgeEntry]:
    rec = client.summary(title, code)
    if rec.get("status") == 404 or not rec.get("extract", "").strip():
        logger.info("wikipedia miss for %s (%r)", code, title)
        client.misses.append(code)
        return []
    prov = f"{client.cache_key(title)} {rec.get('url', '')} {rec.get('fetched_at', '')}".strip()
    return [KnowledgeEntry(code, "wikipedia", s, prov) for s in split_sentences(rec["extract"])]


def load_wiki_titles(path) -> dict[str, str]:
    out = {}
    for line_no, rec in _read_jsonl(path):
        if not isinstance(rec.get("code"), str) or not isinstance(rec.get("title"), str):
            raise ParseError(path, line_no, "expected {'code': str, 'title': str}")
        out[rec["code"]] = rec["title"]
    return out


# -- LLM ----------------------------------------------------------------------

def validate_template(template: str):
    missing = [p for p in ("{code}", "{description}") if p not in template]
    if missing:
        raise ConfigError(f"prompt template is missing placeholder(s): {', '.join(missing)}")


def template_hash(template: str) -> str:
    return hashlib.sha256(template.encode()).hexdigest()[:16]


class LLMClient:
    """Chat-completions style client with a request/response disk cache.

    The API key is read from the environment variable named by
    ``api_key_env``; it is never stored in the cache.
    """

    def __init__(self, cache_dir, endpoint: str = "", model: str = "qwen", temperature: float = 0.0,
                 max_tokens: int = 512, timeout_s: float = 60.0, retries: int = 2,
                 api_key_env: str = "LLM_API_KEY", concurrency: int = 2, session=None,
                 offline: bool = False, backoff_s: float = 1.0):
        self.cache = DiskCache(cache_dir)
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.max_tokens = max_tokens
        self.timeout_s = timeout_s
        self.retries = retries
        self.api_key_env = api_key_env
        self.concurrency = max(1, concurrency)
        self.session = session
        self.offline = offline
        self.backoff_s = backoff_s
        self.network_calls = 0

    def cache_key(self, template: str, code: str) -> str:
        return f"llm/{self.model}/{template_hash(template)}/{code}"

    def request_body(self, prompt: str) -> dict:
        return {"model": self.model, "temperature": self.temperature,
                "max_tokens": self.max_tokens,
                "messages": [{"role": "user", "content": prompt}]}

    def complete(self, code: str, prompt: str, template: str) -> str:
        key = self.cache_key(template, code)
        hit = self.cache.get(key)
        if hit is not None:
            return hit["response"]
        if self.offline or not self.endpoint:
            raise FetchError(code, self.model, f"{code}: no cached LLM response and no endpoint")
        if self.session is None:
            self.session = _default_session()
        body = self.request_body(prompt)
        headers = {}
        if os.environ.get(self.api_key_env):
            headers["Authorization"] = f"Bearer {os.environ[self.api_key_env]}"

        def call():
            self.network_calls += 1
            resp = self.session.post(self.endpoint, json=body, headers=headers,
                                     timeout=self.timeout_s)
            if resp.status_code >= 400:
                raise IOError(f"HTTP {resp.status_code}")
            return resp.json()["choices"][0]["message"]["content"] or ""

        try:
            text = _with_retries(call, self.retries, self.backoff_s)
        except Exception as e:
            raise FetchError(code, self.model, f"{code}: LLM request failed: {e}") from e
        self.cache.put(key, {"request": body, "response": text, "fetched_at": _now(),
                             "model": self.model, "template_hash": template_hash(template)})
        return text

    def seed(self, code: str, template: str, response: str, fetched_at: str = "seeded"):
        self.cache.put(self.cache_key(template, code),
                       {"request": None, "response": response, "fetched_at": fetched_at,
                        "model": self.model, "template_hash": template_hash(template)})


def render_prompt(template: str, code: str, description: str) -> str:
    return template.replace("{code}", code).replace("{description}", description)


def query_llm(code: str, description: str, prompt_template: str,
              client: LLMClient) -> list[KnowledgeEntry]:
    validate_template(prompt_template)
    text = client.complete(code, render_prompt(prompt_template, code, description),
                           prompt_template)
    if not text.strip():
        logger.warning("empty LLM response for %s", code)
        return []
    prov = f"{client.cache_key(prompt_template, code)}"
    return [KnowledgeEntry(code, "llm", s, prov) for s in split_sentences(text)]


# -- assembly -------------------------------------------------------------------

def _fallback(label_space: LabelSpace, code: str) -> KnowledgeEntry:
    desc = label_space.descriptions[code]
    return KnowledgeEntry(code, "umls", preprocess_synonym(desc) or " ".join(desc.split()),
                          FALLBACK_PROVENANCE)


def _assemble(label_space: LabelSpace, entries: Iterable[KnowledgeEntry],
              sources: tuple[str, ...]) -> KnowledgeBase:
    best: dict[tuple, KnowledgeEntry] = {}
    for e in entries:
        if e.code not in label_space or not e.text.strip():
            continue
        # keep the lexicographically smallest provenance so line order never matters
        cur = best.get(e.key())
        if cur is None or e.provenance < cur.provenance:
            best[e.key()] = e
    for code in label_space.codes:
        fb = _fallback(label_space, code)
        best.setdefault(fb.key(), fb)
    grouped: dict[str, list[KnowledgeEntry]] = {c: [] for c in label_space.codes}
    for e in best.values():
        grouped[e.code].append(e)
    return KnowledgeBase(label_space, {c: tuple(sorted(v)) for c, v in grouped.items()},
                         tuple(s for s in SOURCES if s in sources))


def build_kb(label_space: LabelSpace, sources: Iterable[str] = SOURCES, *,
             synonyms_path=None, wiki_titles: Mapping[str, str] | None = None,
             wiki_client: WikipediaClient | None = None, llm_client: LLMClient | None = None,
             prompt_template: str = DEFAULT_PROMPT_TEMPLATE) -> KnowledgeBase:
    """Merge the requested sources into a deduplicated knowledge base.

    Every code receives its own description as a fallback ``umls`` entry.
    """
    sources = tuple(sources)
    unknown = sorted(set(sources) - set(SOURCES))
    if unknown:
        raise ConfigError(f"unknown knowledge sources: {unknown}")
    entries: list[KnowledgeEntry] = []

    if "umls" in sources:
        if synonyms_path is None:
            raise ConfigError("source 'umls' requested but no synonym file given")
        umls, skipped = load_umls_synonyms(synonyms_path, label_space)
        if skipped:
            logger.warning("skipped %d synonym records with unknown codes", skipped)
        entries += umls

    if "wikipedia" in sources:
        if wiki_client is None or wiki_titles is None:
            raise ConfigError("source 'wikipedia' requested but no client/title map given")
        todo = [(c, wiki_titles[c]) for c in label_space.codes if c in wiki_titles]
        with ThreadPoolExecutor(wiki_client.concurrency) as pool:
            for got in pool.map(lambda ct: fetch_wikipedia(ct[0], ct[1], wiki_client), todo):
                entries += got

    if "llm" in sources:
        if llm_client is None:
            raise ConfigError("source 'llm' requested but no LLM client given")
        validate_template(prompt_template)
        codes = list(label_space.codes)
        with ThreadPoolExecutor(llm_client.concurrency) as pool:
            for got in pool.map(
                lambda c: query_llm(c, label_space.descriptions[c], prompt_template, llm_client),
                codes,
            ):
                entries += got

    kb = _assemble(label_space, entries, sources)
    logger.info("knowledge base: %s", kb.source_totals())
    return kb
