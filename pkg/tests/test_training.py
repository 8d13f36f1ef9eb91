import dataclasses

import pytest
import torch
import torch.nn.functional as F

from conftest import load_run
from tracecoder.errors import ValidationError
from tracecoder.model import collate
from tracecoder.training import (
    EarlyStopping, build_model, evaluate, gold_matrix, load_checkpoint, lr_factor, prepare_chunks,
    save_checkpoint, train,
)


def test_lr_schedule():
    assert lr_factor(0, 10, 100) == 0
    assert lr_factor(5, 10, 100) == 0.5
    assert lr_factor(10, 10, 100) == 1
    assert lr_factor(55, 10, 100) == 0.5
    assert lr_factor(100, 10, 100) == 0 and lr_factor(150, 10, 100) == 0
    assert lr_factor(0, 0, 10) == 1


@pytest.mark.parametrize("peak", [1, 4, 7])
def test_early_stopping_keeps_peak(peak):
    stopper = EarlyStopping(3)
    scores = [0.1 * min(e, peak) - (0.01 * (e - peak) if e > peak else 0) for e in range(1, 20)]
    stopped = None
    for e, s in enumerate(scores, 1):
        if stopper.step(e, s):
            stopped = e
            break
    assert stopper.best_epoch == peak and stopped == peak + 3


def test_early_stopping_ties_do_not_improve():
    s = EarlyStopping(2)
    assert not s.step(1, 0.5) and not s.step(2, 0.5) and s.step(3, 0.5)
    assert s.best_epoch == 1


@pytest.fixture(scope="module")
def loaded(small_run):
    return load_run(*small_run)


def _strip(log):
    return [{k: v for k, v in r.items() if k != "wall_time"} for r in log]


def test_training_is_deterministic(loaded):
    cfg, parts, vocab, enc, km = loaded
    a = train(cfg, parts, km, vocab, enc)
    b = train(cfg, parts, km, vocab, enc)
    assert _strip(a.log) == _strip(b.log)
    assert a.threshold == b.threshold and a.best_epoch == b.best_epoch
    for k, v in a.model.state_dict().items():
        assert torch.equal(v, b.model.state_dict()[k]), k


def test_small_step_does_not_increase_loss(loaded):
    cfg, parts, vocab, enc, km = loaded
    torch.manual_seed(0)
    model = build_model(cfg, enc, vocab, parts["train"].label_space, km).eval()
    docs = parts["train"].documents[:8]
    ids, mask = collate(prepare_chunks(docs, vocab, cfg), vocab.pad_id)
    Y = torch.tensor(gold_matrix(docs, parts["train"].label_space), dtype=torch.float32)
    opt = torch.optim.AdamW([p for p in model.parameters() if p.requires_grad], lr=1e-4,
                            weight_decay=0.0)
    before = F.binary_cross_entropy_with_logits(model(ids, mask).logits, Y)
    opt.zero_grad()
    before.backward()
    opt.step()
    with torch.no_grad():
        after = F.binary_cross_entropy_with_logits(model(ids, mask).logits, Y)
    assert after.item() <= before.item()


def test_km_mismatch_rejected(loaded):
    cfg, parts, vocab, enc, km = loaded
    with pytest.raises(ValidationError, match="n_synonym"):
        train(dataclasses.replace(cfg, n_synonym=3), parts, km, vocab, enc)
    with pytest.raises(ValidationError, match="hash"):
        train(dataclasses.replace(cfg, sources=("umls",)), parts, km, vocab, enc)


def test_checkpoint_round_trip(small_run, tmp_path):
    data, run = small_run
    cfg, parts, vocab, _, _ = load_run(data, run)
    a = load_checkpoint(run / "checkpoint.pt", vocab)
    save_checkpoint(tmp_path / "c.pt", a)
    b = load_checkpoint(tmp_path / "c.pt")
    assert a.threshold == b.threshold and a.config_hash == b.config_hash
    assert evaluate(a, parts["dev"]) == evaluate(b, parts["dev"])


def test_evaluate_report(small_run):
    data, run = small_run
    cfg, parts, vocab, _, _ = load_run(data, run)
    bundle = load_checkpoint(run / "checkpoint.pt", vocab)
    rep = evaluate(bundle, parts["test"], ns=(1, 3))
    for key in ("micro_f1", "macro_f1", "micro_auc", "macro_auc", "p_at_1", "p_at_3", "n_docs",
                "threshold", "config_hash"):
        assert key in rep, key
    assert rep == evaluate(bundle, parts["test"], ns=(1, 3))
    assert rep["n_docs"] == len(parts["test"])
