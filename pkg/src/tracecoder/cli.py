"""Command-line interface.

Subcommands share two directories: ``--data`` holds inputs (corpus, labels,
splits, knowledge inputs and client caches) and ``--run`` holds everything
the pipeline produces. A typical synthetic run::

    tracecoder gen-synthetic --out data --seed 7
    tracecoder build-kb --data data --run run --sources umls,wikipedia,llm --offline
    tracecoder select-knowledge --data data --run run --m 4
    tracecoder train --data data --run run
    tracecoder evaluate --data data --run run --split test
    tracecoder trace --data data --run run --doc-id doc0003

Exit codes: 0 success, 1 validation/configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from tracecoder import corpus as corpus_mod
from tracecoder.config import PRESETS, TrainConfig, read_config_file
from tracecoder.errors import ConfigError, TraceCoderError, ValidationError

logger = logging.getLogger("tracecoder")

CONFIG_KEYS = sorted(f.name for f in fields(TrainConfig))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _common(p: argparse.ArgumentParser, run=True):
    p.add_argument("--data", type=Path, default=Path("data"),
                   help="input directory (corpus.jsonl, labels.jsonl, splits.jsonl, ...)")
    if run:
        p.add_argument("--run", type=Path, default=Path("run"), help="output directory")
    p.add_argument("--config", type=Path, help="JSON/YAML file of training config keys")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a named config preset")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help=f"override a config key; keys: {', '.join(CONFIG_KEYS)}")
    p.add_argument("--seed", type=int, help="seed threaded through every random step")
    p.add_argument("--m", type=int, dest="n_synonym", help="knowledge rows per code (M)")
    p.add_argument("--sources", help="comma-separated subset of umls,wikipedia,llm")
    for b in ("lsa", "lcca", "kcca"):
        p.add_argument(f"--disable-{b}", action="store_true", help=f"switch off the {b} branch")
    p.add_argument("--corpus", type=Path, help="corpus file (default: DATA/corpus.jsonl)")
    p.add_argument("--labels", type=Path, help="label-space file (default: DATA/labels.jsonl)")
    p.add_argument("--splits", type=Path, help="split file (default: DATA/splits.jsonl)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="tracecoder", description="Knowledge-grounded, traceable ICD coding.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="write a deterministic synthetic corpus")
    p.add_argument("--out", type=Path, default=Path("data"))
    p.add_argument("--n-docs", type=int, default=64)
    p.add_argument("--n-labels", type=int, default=20)
    p.add_argument("--vocab-size", type=int, default=500)
    p.add_argument("--signature-size", type=int, default=3)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--config", type=Path, help="config file; keys are validated, none are used here")

    p = sub.add_parser("prepare-data", help="validate a corpus and write its splits")
    _common(p, run=False)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("build-kb", help="ingest knowledge sources into RUN/kb.jsonl")
    _common(p)
    p.add_argument("--synonyms", type=Path)
    p.add_argument("--wiki-titles", type=Path)
    p.add_argument("--wiki-config", type=Path, help="JSON client config (endpoint, timeout_s, ...)")
    p.add_argument("--llm-config", type=Path, help="JSON client config (endpoint, model, ...)")
    p.add_argument("--prompt-template", type=Path)
    p.add_argument("--offline", action="store_true", help="never touch the network")

    p = sub.add_parser("select-knowledge", help="build the per-code knowledge matrix")
    _common(p)

    p = sub.add_parser("train", help="train and write RUN/checkpoint.pt")
    _common(p)

    p = sub.add_parser("evaluate", help="score a split and write a metrics report")
    _common(p)
    p.add_argument("--split", default="test", choices=corpus_mod.SPLITS)
    p.add_argument("--n", help="comma-separated N for P@N (default: 5,8,15 up to the label count)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", type=Path)

    for name, helptext in (("predict", "print label probabilities for documents"),
                           ("trace", "write an evidence report for a document")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--doc-id", action="append", required=True)
        p.add_argument("--threshold", type=float)
        if name == "trace":
            p.add_argument("--format", choices=("structured", "readable", "both"), default="both")
            p.add_argument("--top-k-spans", type=int, default=3)
            p.add_argument("--top-k-knowledge", type=int, default=8)
            p.add_argument("--out", type=Path, help="output directory (default: RUN/traces)")
    return ap


def resolve_config(args, base: TrainConfig | None = None) -> TrainConfig:
    data: dict = {}
    if getattr(args, "preset", None):
        base = PRESETS[args.preset]
    if args.config:
        data.update(read_config_file(args.config))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        data[k] = _parse_value(v)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.n_synonym is not None:
        data["n_synonym"] = args.n_synonym
    if args.sources:
        data["sources"] = [s.strip() for s in args.sources.split(",") if s.strip()]
    for b in ("lsa", "lcca", "kcca"):
        if getattr(args, f"disable_{b}"):
            data[b] = False
    return TrainConfig.from_dict(data, base)


def _paths(args):
    return (args.corpus or args.data / "corpus.jsonl",
            args.labels or args.data / "labels.jsonl",
            args.splits or args.data / "splits.jsonl")


def _load_splits(args):
    corpus_path, labels_path, splits_path = _paths(args)
    ls = corpus_mod.load_label_space(labels_path) if labels_path.exists() else None
    c = corpus_mod.load_corpus(corpus_path, ls)
    return c, corpus_mod.split(c, corpus_mod.load_splits(splits_path))


def _run_config(args) -> TrainConfig:
    """Config saved by select-knowledge, with this invocation's overrides on top."""
    saved = args.run / "config.json"
    base = TrainConfig.from_dict(json.loads(saved.read_text())) if saved.exists() else None
    return resolve_config(args, base)


def cmd_gen_synthetic(args):
    from tracecoder.synthetic import SYNTHETIC_LLM_MODEL, generate_synthetic, write_synthetic

    if args.config:
        TrainConfig.from_dict(read_config_file(args.config))
    data = generate_synthetic(args.n_docs, args.n_labels, args.vocab_size, args.seed,
                              signature_size=args.signature_size)
    paths = write_synthetic(data, args.out)
    (args.out / "llm_config.json").write_text(
        json.dumps({"model": SYNTHETIC_LLM_MODEL}, indent=1) + "\n")
    print(f"wrote {len(data.corpus)} documents, {len(data.corpus.label_space)} labels to {args.out}")
    return paths


def cmd_prepare_data(args):
    c, parts = _load_splits(args)
    args.out.mkdir(parents=True, exist_ok=True)
    c.label_space.save(args.out / "labels.jsonl")
    for name, part in parts.items():
        part.save(args.out / f"{name}.jsonl")
    summary = {name: len(part) for name, part in parts.items()}
    (args.out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps(summary))


def _client_config(path, allowed):
    if path is None or not Path(path).exists():
        return {}
    cfg = json.loads(Path(path).read_text())
    unknown = sorted(set(cfg) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}: unknown client config key(s): {', '.join(unknown)}")
    return cfg


def cmd_build_kb(args):
    from tracecoder import knowledge as kn

    cfg = resolve_config(args)
    _, labels_path, _ = _paths(args)
    ls = corpus_mod.load_label_space(labels_path)
    client_keys = ("endpoint", "api_key_env", "timeout_s", "retries", "concurrency", "model",
                   "temperature", "max_tokens", "prompt_template_path")
    kwargs: dict = {}
    if "umls" in cfg.sources:
        kwargs["synonyms_path"] = args.synonyms or args.data / "synonyms.jsonl"
    if "wikipedia" in cfg.sources:
        wc = _client_config(args.wiki_config or args.data / "wiki_config.json", client_keys)
        wc.pop("prompt_template_path", None)
        for k in ("model", "temperature", "max_tokens", "api_key_env"):
            wc.pop(k, None)
        kwargs["wiki_titles"] = kn.load_wiki_titles(args.wiki_titles or args.data / "wiki_titles.jsonl")
        kwargs["wiki_client"] = kn.WikipediaClient(args.data / "cache" / "wikipedia",
                                                   offline=args.offline, **wc)
    if "llm" in cfg.sources:
        lc = _client_config(args.llm_config or args.data / "llm_config.json", client_keys)
        tpath = args.prompt_template or lc.pop("prompt_template_path", None)
        kwargs["prompt_template"] = (Path(tpath).read_text(encoding="utf-8").strip() if tpath
                                     else kn.DEFAULT_PROMPT_TEMPLATE)
        kwargs["llm_client"] = kn.LLMClient(args.data / "cache" / "llm", offline=args.offline, **lc)
    kb = kn.build_kb(ls, cfg.sources, **kwargs)
    args.run.mkdir(parents=True, exist_ok=True)
    kb.export(args.run / "kb.jsonl")
    (args.run / "kb_counts.json").write_text(
        json.dumps({"sources": list(kb.sources), "totals": kb.source_totals(),
                    "per_code": kb.counts()}, indent=1, sort_keys=True) + "\n")
    print(json.dumps(kb.source_totals()))


def cmd_select_knowledge(args):
    from tracecoder.diversity import build_knowledge_matrix
    from tracecoder.encoder import SentenceEncoder, save_encoder
    from tracecoder.knowledge import KnowledgeBase
    from tracecoder.training import init_encoder

    cfg = resolve_config(args)
    _, parts = _load_splits(args)
    ls = parts["train"].label_space
    kb = KnowledgeBase.load(args.run / "kb.jsonl", ls, cfg.sources)
    stray = sorted({e.source for e in kb.all_entries()} - set(cfg.sources) - {"umls"})
    if stray:
        raise ConfigError(f"kb.jsonl contains sources {stray} not in --sources {list(cfg.sources)}")
    vocab = corpus_mod.build_vocab(parts["train"], cfg.min_freq)
    encoder = init_encoder(cfg, vocab)
    km = build_knowledge_matrix(kb, SentenceEncoder(encoder, vocab), cfg.n_synonym)
    args.run.mkdir(parents=True, exist_ok=True)
    vocab.save(args.run / "vocab.txt")
    save_encoder(args.run / "encoder.pt", encoder, vocab)
    km.save(args.run / "knowledge_matrix.npz")
    (args.run / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    print(f"knowledge matrix for {len(km.codes)} codes, M={km.M}, hash {km.config_hash}")


def cmd_train(args):
    from tracecoder.diversity import KnowledgeMatrices
    from tracecoder.encoder import load_encoder
    from tracecoder.training import save_checkpoint, train

    cfg = _run_config(args)
    _, parts = _load_splits(args)
    vocab = corpus_mod.Vocab.load(args.run / "vocab.txt")
    encoder, _ = load_encoder(args.run / "encoder.pt", vocab)
    km = KnowledgeMatrices.load(args.run / "knowledge_matrix.npz")
    result = train(cfg, parts, km, vocab, encoder, log_path=args.run / "train_log.jsonl")
    save_checkpoint(args.run / "checkpoint.pt", result)
    print(f"best epoch {result.best_epoch}, threshold {result.threshold}")


def _bundle(args):
    from tracecoder.training import load_checkpoint

    vocab_path = args.run / "vocab.txt"
    vocab = corpus_mod.Vocab.load(vocab_path) if vocab_path.exists() else None
    return load_checkpoint(args.run / "checkpoint.pt", vocab)


def cmd_evaluate(args):
    from tracecoder.training import evaluate, write_report

    _, parts = _load_splits(args)
    bundle = _bundle(args)
    ns = [int(n) for n in args.n.split(",") if n] if args.n else None
    report = evaluate(bundle, parts[args.split], args.threshold, ns)
    out = args.out or args.run / f"report_{args.split}.json"
    write_report(report, out)
    print(json.dumps(report, sort_keys=True))


def _documents(args):
    c, _ = _load_splits(args)
    by_id = {d.id: d for d in c}
    missing = [i for i in args.doc_id if i not in by_id]
    if missing:
        raise ValidationError(f"unknown document id(s): {missing}")
    return [by_id[i] for i in args.doc_id]


def cmd_predict(args):
    from tracecoder.trace import predict

    bundle = _bundle(args)
    thr = bundle.threshold if args.threshold is None else args.threshold
    for doc in _documents(args):
        pred = predict(bundle, doc)
        scores = {c: float(s) for c, s in zip(bundle.label_space.codes, pred.scores)}
        print(json.dumps({"id": doc.id, "threshold": thr, "scores": scores}))


def cmd_trace(args):
    from tracecoder.diversity import KnowledgeMatrices
    from tracecoder.trace import build_trace, predict, render_report

    bundle = _bundle(args)
    km = KnowledgeMatrices.load(args.run / "knowledge_matrix.npz", expected_hash=bundle.km_hash)
    out_dir = args.out or args.run / "traces"
    out_dir.mkdir(parents=True, exist_ok=True)
    for doc in _documents(args):
        trace = build_trace(predict(bundle, doc), bundle, km, args.threshold,
                            args.top_k_spans, args.top_k_knowledge)
        if args.format in ("structured", "both"):
            render_report(trace, "structured", out_dir / f"{doc.id}.json")
        if args.format in ("readable", "both"):
            render_report(trace, "readable", out_dir / f"{doc.id}.html", doc.text)
        print(f"{doc.id}: {len(trace.codes)} predicted code(s) -> {out_dir}")


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "prepare-data": cmd_prepare_data,
    "build-kb": cmd_build_kb,
    "select-knowledge": cmd_select_knowledge,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
    "trace": cmd_trace,
}


def cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TraceCoderError, OSError, RuntimeError, ValueError, KeyError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
