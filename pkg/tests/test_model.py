import math

import pytest
import torch

from conftest import finite_diff_grads, random_batch, rel_err, tiny_model
from tracecoder.errors import ConfigError, ValidationError
from tracecoder.model import Branches, ConvHead, bce_loss, collate, forward_head, fuse
from tracecoder.corpus import chunk

DT = torch.float64


def reps(L=4, d=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return [torch.randn(L, d, generator=g, dtype=DT) for _ in range(3)]


def test_fuse_channels():
    a, b, c = reps()
    f = fuse(a, b, c)
    assert f.shape == (4, 3, 8)
    assert torch.equal(f[:, 0], a) and torch.equal(f[:, 1], b) and torch.equal(f[:, 2], c)


def test_fuse_disabled_is_zero():
    a, b, c = reps()
    f = fuse(a, b, c, Branches(kcca=False))
    assert torch.equal(f[:, 2], torch.zeros_like(c))
    f = fuse(a, None, None, Branches(True, False, False))
    assert torch.equal(f[:, 1:], torch.zeros(4, 2, 8, dtype=DT))


def test_no_branches_is_config_error():
    with pytest.raises(ConfigError):
        Branches(False, False, False)


def test_head_shapes_and_range():
    head = ConvHead(64, 3).to(DT)
    p = forward_head(torch.randn(50, 3, 128, dtype=DT), head)
    assert p.shape == (50,) and ((p > 0) & (p < 1)).all()


def test_head_zero_input_zero_bias():
    head = ConvHead(8, 3).to(DT)
    with torch.no_grad():
        head.conv1.bias.zero_()
        head.conv2.bias.zero_()
    assert torch.equal(forward_head(torch.zeros(5, 3, 16, dtype=DT), head),
                       torch.full((5,), 0.5, dtype=DT))


def test_head_config_errors():
    with pytest.raises(ConfigError):
        ConvHead(4, kernel_size=2)
    with pytest.raises(ConfigError):
        ConvHead(0)


def test_head_gradient():
    head = ConvHead(4, 3).to(DT)
    x = torch.randn(5, 3, 16, generator=torch.Generator().manual_seed(3), dtype=DT)
    y = torch.tensor([1, 0, 1, 1, 0], dtype=DT)

    def f():
        return bce_loss(forward_head(x, head), y)

    head.zero_grad()
    f().backward()
    analytic = [p.grad.clone() for p in head.parameters()]
    for a, n in zip(analytic, finite_diff_grads(f, list(head.parameters()))):
        assert rel_err(a, n) < 1e-4


def test_bce_values():
    y = torch.tensor([1.0, 0.0, 1.0])
    assert float(bce_loss(y.clone(), y)) <= 1e-6
    assert abs(float(bce_loss(torch.full((3,), 0.5, dtype=DT), y.to(DT))) - math.log(2)) < 1e-9
    got = float(bce_loss(torch.tensor([0.9, 0.2], dtype=DT), torch.tensor([1.0, 0.0], dtype=DT)))
    assert abs(got - (-(math.log(0.9) + math.log(0.8)) / 2)) < 1e-12
    with pytest.raises(ValidationError):
        bce_loss(torch.ones(2), torch.ones(3))


def test_collate_pads_chunk_count():
    a = chunk([3, 4, 5, 6, 7], 4, 8)
    b = chunk([3], 4, 8)
    ids, mask = collate([a, b])
    assert ids.shape == (2, 2, 4) and mask[1].sum() == 1 and not mask[1, 1].any()


def test_model_forward_shapes():
    model = tiny_model().eval()
    ids, mask = random_batch(3, 2, 8, 20)
    out = model(ids, mask)
    assert out.logits.shape == (3, 5)
    assert out.attention["lsa"].weights.shape == (3, 2, 5, 8)
    assert out.attention["kcca"].weights.shape == (3, 5, 2, 16)


def test_disabled_branch_not_computed():
    model = tiny_model(branches=Branches(lsa=True, lcca=False, kcca=False)).eval()
    out = model(*random_batch(2, 2, 8, 20))
    assert set(out.attention) == {"lsa"}


def test_padding_token_ids_do_not_matter():
    model = tiny_model().eval()
    ids, mask = random_batch(2, 2, 8, 20, seed=4)
    alt = ids.masked_fill(~mask, 7)
    assert torch.equal(model(ids, mask).logits, model(alt, mask).logits)


def test_shape_mismatch_rejected():
    from tracecoder.model import TraceCoder

    m = tiny_model()
    with pytest.raises(ValidationError):
        TraceCoder(m.encoder, torch.zeros(5, 16, dtype=DT), torch.zeros(4, 2, 16, dtype=DT),
                   torch.zeros(4, 16, dtype=DT))
