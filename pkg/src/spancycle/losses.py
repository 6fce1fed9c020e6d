"""Training objective: relation loss, keep-vector loss and distillation loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class LossBreakdown:
    l_mr: float
    l_ld: float
    l_mt: float

    @property
    def total(self) -> float:
        return self.l_mr + self.l_ld + self.l_mt

    def to_dict(self) -> dict[str, float]:
        return {"l_mr": self.l_mr, "l_ld": self.l_ld, "l_mt": self.l_mt, "total": self.total}


def _log1p_sum_exp(x: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    """log(1 + sum_{keep} exp(x)) along the last axis, stable."""
    x = x.masked_fill(~keep, float("-inf"))
    zero = torch.zeros(x.shape[:-1] + (1,), dtype=x.dtype)
    return torch.logsumexp(torch.cat([zero, x], dim=-1), dim=-1)


def loss_mr(S: torch.Tensor, G: torch.Tensor, pair_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Multi-label categorical cross-entropy summed over relations.

    S, G: (3, n, n). ``pair_mask`` (n, n) restricts which pairs count as samples.
    """
    G = torch.as_tensor(G, dtype=S.dtype)
    s = S.flatten(-2)
    pos = G.flatten(-2) > 0.5
    valid = torch.ones_like(pos) if pair_mask is None else pair_mask.flatten()[None].expand_as(pos)
    l_neg = _log1p_sum_exp(s, ~pos & valid)
    l_pos = _log1p_sum_exp(-s, pos & valid)
    return (l_neg + l_pos).sum()


def loss_ld(keep_pred: torch.Tensor, keep_gold: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Binary cross-entropy averaged over the |x| positions, summed over relations."""
    keep_gold = torch.as_tensor(keep_gold, dtype=keep_pred.dtype)
    if keep_pred.shape[-1] == 0:
        return keep_pred.sum()
    p = keep_pred.clamp(eps, 1.0 - eps)
    bce = -(keep_gold * torch.log(p) + (1.0 - keep_gold) * torch.log1p(-p))
    return bce.mean(dim=-1).sum()


def loss_mt(P_student: torch.Tensor, P_teacher: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the |x|^2 entries, summed over relations."""
    P_teacher = torch.as_tensor(P_teacher, dtype=P_student.dtype)
    if P_student.shape != P_teacher.shape:
        raise ValueError(f"student matrices {tuple(P_student.shape)} and teacher matrices "
                         f"{tuple(P_teacher.shape)} differ in shape")
    if P_student.shape[-1] == 0:
        return P_student.sum()
    return ((P_student - P_teacher) ** 2).mean(dim=(-1, -2)).sum()
