"""Task losses and the uncertainty-weighted multi-task combination."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .core import IGNORE, DomainError, EmptyBatchError, ShapeError, TaskWeights

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossReport:
    l_hse: float
    l_lcz: float
    l_mt: float
    s_hse: float
    s_lcz: float

    CSV_FIELDS = ("l_hse", "l_lcz", "l_mt", "s_hse", "s_lcz")

    def as_row(self) -> dict:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}


def weighted_mae(pred: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """MAE with per-pixel weights ``exp(ref)``, normalized by the weight sum.

    Dense-settlement pixels count up to e times more than empty ones.
    """
    pred = torch.as_tensor(pred)
    ref = torch.as_tensor(ref, dtype=pred.dtype, device=pred.device)
    if pred.shape != ref.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} vs ref {tuple(ref.shape)}")
    w = torch.exp(ref)
    return (w * (pred - ref).abs()).sum() / w.sum()


def lcz_cross_entropy(avg_probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-probability of the reference class over non-IGNORE pixels.

    ``avg_probs`` is [N, K, h, w] (already a probability simplex), ``labels`` is [N, h, w].
    """
    labels = torch.as_tensor(labels, device=avg_probs.device).long()
    if avg_probs.dim() != 4 or labels.shape != (avg_probs.shape[0], *avg_probs.shape[2:]):
        raise ShapeError(f"probs {tuple(avg_probs.shape)} vs labels {tuple(labels.shape)}")
    valid = labels != IGNORE
    if not bool(valid.any()):
        raise EmptyBatchError("every LCZ pixel is IGNORE")
    k = avg_probs.shape[1]
    if bool((labels[valid] >= k).any()) or bool((labels[valid] < 0).any()):
        raise ShapeError(f"label outside 0..{k - 1}")
    idx = torch.where(valid, labels, torch.zeros_like(labels)).unsqueeze(1)
    p_true = avg_probs.gather(1, idx).squeeze(1)[valid]
    return -torch.log(p_true.clamp_min(PROB_FLOOR)).mean()


def multitask_loss(l_hse, l_lcz, s_hse, s_lcz):
    """0.5 * exp(-s_hse) * L_hse + exp(-s_lcz) * L_lcz + s_hse / 2 + s_lcz / 2

    ``s = log(sigma^2)`` so ``log(sigma) = s / 2``. Works on python floats
    and on (differentiable) tensors.
    """
    exp = torch.exp if any(isinstance(v, torch.Tensor) for v in (l_hse, l_lcz, s_hse, s_lcz)) else math.exp
    return 0.5 * exp(-s_hse) * l_hse + exp(-s_lcz) * l_lcz + 0.5 * s_hse + 0.5 * s_lcz


def optimal_task_weights(l_hse: float, l_lcz: float) -> TaskWeights:
    """Minimizer of :func:`multitask_loss` over (s_hse, s_lcz) for fixed task losses."""
    if l_hse <= 0 or l_lcz <= 0:
        raise DomainError("optimal weights need strictly positive task losses")
    return TaskWeights(s_hse=math.log(l_hse), s_lcz=math.log(2.0 * l_lcz))
