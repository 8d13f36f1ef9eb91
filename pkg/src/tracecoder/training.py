"""Training loop, checkpoints and evaluation reports."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from tracecoder.config import TrainConfig
from tracecoder.corpus import Chunk, Corpus, Document, LabelSpace, Vocab, build_vocab
from tracecoder.diversity import KnowledgeMatrices, config_hash as km_config_hash
from tracecoder.encoder import ContextEncoder, EncoderConfig, SentenceEncoder, encode_labels
from tracecoder.errors import TrainingDiverged, ValidationError
from tracecoder.metrics import (
    EvalBatch,
    all_metrics,
    micro_f1,
    optimize_threshold,
    optimize_threshold_per_label,
)
from tracecoder.model import Branches, TraceCoder, collate, document_chunks

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def init_encoder(config: TrainConfig, vocab: Vocab) -> ContextEncoder:
    """The untrained encoder snapshot; a pure function of (config, vocab)."""
    return ContextEncoder(EncoderConfig(
        vocab_size=len(vocab), d=config.hidden_size, layers=config.layers, heads=config.heads,
        ff=config.ff_size, max_position=config.chunk_size, dropout=config.dropout,
        seed=config.seed,
    ))


def build_model(config: TrainConfig, encoder: ContextEncoder, vocab: Vocab,
                label_space: LabelSpace, km: KnowledgeMatrices) -> TraceCoder:
    encoder = copy.deepcopy(encoder)  # fine-tuning must not touch the caller's snapshot
    labels = encode_labels(label_space, encoder, vocab, frozen=not config.train_label_matrix)
    k_best, k_avg = km.stacked(label_space.codes)
    return TraceCoder(
        encoder, labels.matrix, torch.from_numpy(k_best), torch.from_numpy(k_avg),
        branches=Branches(config.lsa, config.lcca, config.kcca),
        head_channels=config.head_channels, kernel_size=config.head_kernel,
        leaky_slope=config.leaky_slope, d_a=config.attention_dim,
        kcca_literal=config.kcca_literal, train_labels=config.train_label_matrix,
        seed=config.seed + 1,
    )


def lr_factor(step: int, warmup: int, total: int) -> float:
    """Linear warmup to 1 over ``warmup`` steps, then linear decay to 0 at ``total``."""
    if step < warmup:
        return step / warmup
    return max(0.0, (total - step) / max(1, total - warmup))


def gold_matrix(docs: Sequence[Document], label_space: LabelSpace) -> np.ndarray:
    return np.array([label_space.multi_hot(d.codes) for d in docs], dtype=np.float64).reshape(
        len(docs), len(label_space))


def prepare_chunks(docs: Sequence[Document], vocab: Vocab, config: TrainConfig) -> list[list[Chunk]]:
    return [document_chunks(d, vocab, config.chunk_size, config.max_length, config.chunk_stride)
            for d in docs]


@torch.no_grad()
def predict_scores(model: TraceCoder, chunk_lists: Sequence[Sequence[Chunk]],
                   batch_size: int = 16, pad_id: int = 0) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(chunk_lists), batch_size):
        ids, mask = collate(chunk_lists[i : i + batch_size], pad_id)
        out.append(model(ids, mask).probs.to(torch.float64).numpy())
    model.train(was_training)
    if not out:
        return np.zeros((0, model.n_labels))
    return np.concatenate(out)


def dev_micro_f1(model, chunk_lists, gold, threshold, batch_size, pad_id) -> float:
    scores = predict_scores(model, chunk_lists, batch_size, pad_id)
    return micro_f1(EvalBatch(scores, gold, threshold))


class EarlyStopping:
    """Tracks the best score; ``step`` returns True once patience runs out."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def step(self, epoch: int, score: float) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.bad_epochs == 0


@dataclass
class TrainResult:
    model: TraceCoder
    vocab: Vocab
    label_space: LabelSpace
    config: TrainConfig
    threshold: float | list[float]
    best_epoch: int
    log: list[dict] = field(default_factory=list)
    km_hash: str = ""

    @property
    def config_hash(self) -> str:
        return run_hash(self.config, self.vocab, self.km_hash)


def run_hash(config: TrainConfig, vocab: Vocab, km_hash: str) -> str:
    payload = json.dumps({"config": config.hash(), "vocab": vocab.fingerprint(), "km": km_hash})
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def subsample(docs: Sequence[Document], fraction: float, seed: int) -> list[Document]:
    if fraction >= 1:
        return list(docs)
    g = torch.Generator().manual_seed(seed)
    k = max(1, round(fraction * len(docs)))
    keep = sorted(torch.randperm(len(docs), generator=g)[:k].tolist())
    return [docs[i] for i in keep]


def train(config: TrainConfig, splits: dict[str, Corpus], km: KnowledgeMatrices,
          vocab: Vocab | None = None, encoder: ContextEncoder | None = None,
          log_path=None) -> TrainResult:
    """Fit the model on ``splits["train"]`` selecting the best epoch on ``splits["dev"]``.

    ``encoder`` defaults to :func:`init_encoder`; it must be the same snapshot
    the knowledge matrix was built with.
    """
    train_c, dev_c = splits["train"], splits.get("dev")
    label_space = train_c.label_space
    if not len(train_c):
        raise ValidationError("training split is empty")
    vocab = vocab or build_vocab(train_c, config.min_freq)
    encoder = encoder or init_encoder(config, vocab)
    if km.M != config.n_synonym:
        raise ValidationError(f"knowledge matrix has M={km.M}, config n_synonym={config.n_synonym}")
    expected = km_config_hash(config.n_synonym, config.sources, SentenceEncoder(encoder, vocab).id)
    if km.config_hash != expected:
        raise ValidationError(
            f"knowledge matrix hash {km.config_hash} does not match this encoder/config ({expected})"
        )

    torch.manual_seed(config.seed)
    model = build_model(config, encoder, vocab, label_space, km)

    train_docs = subsample(train_c.documents, config.train_fraction, config.seed)
    dev_docs = list(dev_c.documents) if dev_c is not None else []
    if not dev_docs:
        logger.warning("no dev documents: selecting on training micro-F1")
    tr_chunks = prepare_chunks(train_docs, vocab, config)
    tr_gold = gold_matrix(train_docs, label_space)
    sel_docs = dev_docs or train_docs
    sel_chunks = prepare_chunks(sel_docs, vocab, config)
    sel_gold = gold_matrix(sel_docs, label_space)
    Y = torch.tensor(tr_gold, dtype=next(model.parameters()).dtype)

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=0.0)
    steps_per_epoch = math.ceil(len(train_docs) / config.batch_size)
    total = steps_per_epoch * config.epochs
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: lr_factor(s, config.warmup_steps, total))
    gen = torch.Generator().manual_seed(config.seed)
    stopper = EarlyStopping(config.early_stopping)
    best_state = copy.deepcopy(model.state_dict())
    log: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            model.train()
            perm = torch.randperm(len(train_docs), generator=gen).tolist()
            total_loss = 0.0
            for s in range(0, len(perm), config.batch_size):
                idx = perm[s : s + config.batch_size]
                ids, mask = collate([tr_chunks[i] for i in idx], vocab.pad_id)
                logits = model(ids, mask).logits
                loss = F.binary_cross_entropy_with_logits(logits, Y[idx])
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch docs "
                        f"{[train_docs[i].id for i in idx]}; lr={sched.get_last_lr()[0]:.3g}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                sched.step()
                total_loss += loss.item() * len(idx)
            score = dev_micro_f1(model, sel_chunks, sel_gold, config.train_threshold,
                                 config.batch_size, vocab.pad_id)
            stop = stopper.step(epoch, score)
            if stopper.improved_last:
                best_state = copy.deepcopy(model.state_dict())
            rec = {"epoch": epoch, "train_loss": total_loss / len(train_docs),
                   "dev_micro_f1": score, "lr": sched.get_last_lr()[0],
                   "wall_time": round(time.perf_counter() - t0, 4)}
            log.append(rec)
            logger.info("epoch %d loss %.4f dev micro-F1 %.4f", epoch, rec["train_loss"], score)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if stop:
                break
    finally:
        if log_fh:
            log_fh.close()

    model.load_state_dict(best_state)
    model.eval()
    threshold: float | list[float] = config.train_threshold
    if dev_docs:
        scores = predict_scores(model, sel_chunks, config.batch_size, vocab.pad_id)
        if config.per_label_threshold:
            threshold = optimize_threshold_per_label(scores, sel_gold, config.threshold_grid).tolist()
        else:
            threshold = optimize_threshold(scores, sel_gold, config.threshold_grid)
    return TrainResult(model, vocab, label_space, config, threshold, stopper.best_epoch, log,
                       km.config_hash)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, result: TrainResult):
    m = result.model
    torch.save({
        "version": CHECKPOINT_VERSION,
        "encoder_config": m.encoder.config.__dict__,
        "vocab": list(result.vocab.tokens),
        "vocab_hash": result.vocab.fingerprint(),
        "label_space": result.label_space.to_records(),
        "config": result.config.to_dict(),
        "config_hash": result.config_hash,
        "km_hash": result.km_hash,
        "threshold": result.threshold,
        "best_epoch": result.best_epoch,
        "state_dict": m.state_dict(),
    }, path)


def load_checkpoint(path, vocab: Vocab | None = None) -> TrainResult:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {blob.get('version')}")
    if vocab is not None and vocab.fingerprint() != blob["vocab_hash"]:
        raise ValidationError(
            f"vocab hash mismatch: checkpoint {blob['vocab_hash']} vs given {vocab.fingerprint()}")
    config = TrainConfig.from_dict(blob["config"])
    stored_vocab = Vocab(blob["vocab"])
    label_space = LabelSpace.from_records(blob["label_space"])
    sd = blob["state_dict"]
    encoder = ContextEncoder(EncoderConfig(**blob["encoder_config"]))
    model = TraceCoder(
        encoder, sd["label_matrix"], sd["k_best"], sd["k_avg"],
        branches=Branches(config.lsa, config.lcca, config.kcca),
        head_channels=config.head_channels, kernel_size=config.head_kernel,
        leaky_slope=config.leaky_slope, d_a=config.attention_dim,
        kcca_literal=config.kcca_literal, train_labels=config.train_label_matrix,
    )
    model.load_state_dict(sd)
    model.eval()
    return TrainResult(model, stored_vocab, label_space, config, blob["threshold"],
                       blob["best_epoch"], [], blob["km_hash"])


# -- evaluation -------------------------------------------------------------------

DEFAULT_NS = (5, 8, 15)


def evaluate(bundle: TrainResult, corpus: Corpus, threshold=None,
             ns: Sequence[int] | None = None) -> dict:
    """Metrics for ``corpus``. Without explicit ``ns``, P@N uses whichever of 5, 8, 15 fit."""
    if corpus.label_space.codes != bundle.label_space.codes:
        raise ValidationError("corpus and checkpoint label spaces differ")
    if not len(corpus):
        raise ValidationError("cannot evaluate an empty corpus")
    threshold = bundle.threshold if threshold is None else threshold
    chunks = prepare_chunks(corpus.documents, bundle.vocab, bundle.config)
    scores = predict_scores(bundle.model, chunks, bundle.config.batch_size, bundle.vocab.pad_id)
    gold = gold_matrix(corpus.documents, corpus.label_space)
    ns = [n for n in DEFAULT_NS if n <= len(bundle.label_space)] if ns is None else list(ns)
    report = all_metrics(EvalBatch(scores, gold, np.asarray(threshold)), ns)
    report.update({"n_docs": len(corpus), "threshold": threshold,
                   "config_hash": bundle.config_hash})
    return report


def write_report(report: dict, path):
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
