import json

import pytest
import torch

from tracecoder.corpus import Corpus, Document, LabelSpace
from tracecoder.diversity import KnowledgeMatrices, KnowledgeMatrix
from tracecoder.encoder import ContextEncoder, EncoderConfig
from tracecoder.knowledge import KnowledgeEntry
from tracecoder.model import Branches, TraceCoder

# name -> description of every acceptance criterion, in report order
CRITERIA = {
    "c01": "1  full-scale reproduction out of scope; adapter seam works",
    "c02": "2  MDP exact == brute force (1e-9), greedy <= exact, < 30 s",
    "c03": "3  end-to-end gradient vs central differences, rel err < 1e-4, < 2 min",
    "c04": "4  overfit smoke: train micro-F1 >= 0.95, dev micro-F1 >= 0.80, < 10 min",
    "c05": "5  metric oracles agree to 1e-9 on 100 random instances + hand cases",
    "c06": "6  attention rows sum to 1, padding weight 0, padding chunk inert",
    "c07": "7  optimize_threshold returns a grid argmax",
    "c08": "8  ablation wiring: disabled branch inert, enabled branch live",
    "c09": "9  traceability: top-1 LSA span hits a signature token (>= 90%), weights bit-exact",
    "c10": "10 two seeded pipeline runs give byte-identical evaluation reports",
}
_outcomes: dict[str, list[str]] = {}
_extra_lines: list[str] = []


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    key = name.split("_")[1] if name.startswith("test_c") else None
    if key not in CRITERIA:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _outcomes.setdefault(key, []).append("PASS" if report.passed else
                                            "SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for key, label in CRITERIA.items():
        res = _outcomes.get(key)
        if res is None:
            continue
        status = "FAIL" if "FAIL" in res else "SKIP" if "SKIP" in res else "PASS"
        terminalreporter.write_line(f"[{status}] criterion {label}")
    for line in _extra_lines:
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_notes():
    """Free-form measurement lines echoed in the terminal summary."""
    return _extra_lines


# -- small hand-built models -----------------------------------------------------

def make_label_space(n: int) -> LabelSpace:
    codes = tuple(f"C{i}" for i in range(n))
    return LabelSpace(codes, {c: f"description of {c.lower()}" for c in codes})


def make_km(label_space: LabelSpace, M: int, d: int, seed: int = 0,
            dtype=torch.float64) -> KnowledgeMatrices:
    g = torch.Generator().manual_seed(seed)
    per = {}
    for c in label_space.codes:
        mat = torch.randn(M, d, generator=g, dtype=dtype).numpy()
        entries = tuple(KnowledgeEntry(c, "umls", f"entry {i} of {c}", "test") for i in range(M))
        per[c] = KnowledgeMatrix(c, entries, tuple(range(M)), mat, mat.mean(axis=0))
    return KnowledgeMatrices(label_space.codes, per, M, "test")


def tiny_model(d=16, T=8, L=5, M=2, F=4, vocab_size=20, layers=1, heads=2,
               branches=Branches(), seed=0, dtype=torch.float64, kcca_literal=False,
               train_labels=False):
    enc = ContextEncoder(EncoderConfig(vocab_size=vocab_size, d=d, layers=layers, heads=heads,
                                       ff=2 * d, max_position=T, dropout=0.0, seed=seed))
    enc = enc.to(dtype)
    g = torch.Generator().manual_seed(seed + 100)
    labels = torch.randn(L, d, generator=g, dtype=dtype)
    k_best = torch.randn(L, M, d, generator=g, dtype=dtype)
    model = TraceCoder(enc, labels, k_best, k_best.mean(1), branches=branches, head_channels=F,
                       seed=seed + 1, kcca_literal=kcca_literal, train_labels=train_labels)
    return model.to(dtype)


def random_batch(B, C, T, vocab_size, seed=0, min_len=1):
    """Random ids with per-document lengths; every document has >= min_len real tokens."""
    g = torch.Generator().manual_seed(seed)
    ids = torch.randint(3, vocab_size, (B, C, T), generator=g)
    mask = torch.zeros(B, C, T, dtype=torch.bool)
    for b in range(B):
        n = int(torch.randint(min_len, C * T + 1, (1,), generator=g))
        mask.view(B, -1)[b, :n] = True
    ids = ids.masked_fill(~mask, 0)
    return ids, mask


@pytest.fixture
def toy_corpus():
    ls = LabelSpace(("A", "B", "C"), {"A": "alpha fever", "B": "beta cough", "C": "gamma rash"})
    docs = (
        Document("d1", "alpha fever today", frozenset({"A"})),
        Document("d2", "beta cough and fever", frozenset({"B"})),
        Document("d3", "gamma rash beta", frozenset({"B", "C"})),
    )
    return Corpus(docs, ls)


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write((r if isinstance(r, str) else json.dumps(r)) + "\n")
    return path


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    na, nb = float(a.norm()), float(b.norm())
    if max(na, nb) < 1e-12:
        return 0.0
    return float((a - b).norm()) / max(na, nb)


def finite_diff_grads(loss_fn, params, h=1e-5):
    out = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * h)
            out.append(g)
    return out



def run_pipeline(root, seed=7, gen=(), sets=(), m=4, sources="umls,wikipedia,llm", extra=()):
    """Drive the CLI from synthetic data to a checkpoint under ``root``; returns (data, run)."""
    from tracecoder.cli import cli

    data, run = root / "data", root / "run"
    common = ["--data", str(data), "--run", str(run), "--seed", str(seed), "--sources", sources,
              *extra]
    for s in sets:
        common += ["--set", s]
    steps = [
        ["gen-synthetic", "--out", str(data), "--seed", str(seed), *gen],
        ["build-kb", "--offline", *common],
        ["select-knowledge", "--m", str(m), *common],
        ["train", *common],
    ]
    for argv in steps:
        assert cli(argv) == 0, argv
    return data, run


SMALL_GEN = ("--n-docs", "24", "--n-labels", "6", "--vocab-size", "80")
SMALL_SETS = ("epochs=3", "hidden_size=16", "layers=1", "heads=2", "ff_size=32",
              "head_channels=4", "max_length=48", "chunk_size=16", "warmup_steps=2")


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """A tiny trained run shared by the training, trace and CLI tests."""
    return run_pipeline(tmp_path_factory.mktemp("small"), seed=3, gen=SMALL_GEN, sets=SMALL_SETS,
                        m=2)


def load_run(data, run):
    """Reload what ``train`` consumed: (config, splits, vocab, encoder, knowledge matrix)."""
    from tracecoder import corpus as cm
    from tracecoder.config import TrainConfig
    from tracecoder.encoder import load_encoder

    cfg = TrainConfig.from_dict(json.loads((run / "config.json").read_text()))
    c = cm.load_corpus(data / "corpus.jsonl", cm.load_label_space(data / "labels.jsonl"))
    parts = cm.split(c, cm.load_splits(data / "splits.jsonl"))
    vocab = cm.Vocab.load(run / "vocab.txt")
    encoder, _ = load_encoder(run / "encoder.pt", vocab)
    return cfg, parts, vocab, encoder, KnowledgeMatrices.load(run / "knowledge_matrix.npz")
