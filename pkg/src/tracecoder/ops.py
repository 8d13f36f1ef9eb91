import torch


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor, dim: int = -1) -> torch.Tensor:
    """Softmax over positions where ``mask`` is true; exactly 0 elsewhere.

    Rows with no true position come back all-zero instead of NaN.
    """
    mask = mask.bool()
    any_valid = mask.any(dim=dim, keepdim=True)
    neg_inf = torch.finfo(scores.dtype).min
    filled = scores.masked_fill(~mask, float("-inf"))
    # fully masked rows: softmax over a finite dummy, then zeroed below
    filled = torch.where(any_valid, filled, torch.full_like(scores, neg_inf))
    probs = torch.softmax(filled, dim=dim)
    return probs * mask.to(probs.dtype)
