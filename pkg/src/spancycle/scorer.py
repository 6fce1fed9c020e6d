"""Per-relation token-pair scores with rotary position embeddings."""

from __future__ import annotations

import math

import torch
from torch import nn

from .config import Config
from .encoder import linear
from .schema import RELATIONS


def rope_angles(positions: torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    if dim % 2:
        raise ValueError(f"rotary dimension must be even, got {dim}")
    freqs = base ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    return positions.to(torch.float64)[..., None] * freqs


def apply_rope(x: torch.Tensor, positions: torch.Tensor, base: float = 10000.0) -> torch.Tensor:
    """Rotate consecutive pairs (x[2t], x[2t+1]) of x (..., n, d) by position * theta_t."""
    angles = rope_angles(positions, x.shape[-1], base).to(x.dtype)
    cos, sin = angles.cos(), angles.sin()
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out = torch.stack((x_even * cos - x_odd * sin, x_even * sin + x_odd * cos), dim=-1)
    return out.flatten(-2)


def rope_rotate(v, position: int, base: float = 10000.0) -> torch.Tensor:
    v = torch.as_tensor(v, dtype=torch.float64)
    if v.shape[-1] % 2:
        raise ValueError(f"rotary dimension must be even, got {v.shape[-1]}")
    return apply_rope(v, torch.tensor(position, dtype=torch.float64), base)


class Scorer(nn.Module):
    def __init__(self, config: Config, generator: torch.Generator):
        super().__init__()
        dtype = getattr(torch, config.dtype)
        self.d_i = config.d_i
        self.base = config.rope_base
        self.q = nn.ModuleDict({r: linear(config.d_h, config.d_i, generator, dtype) for r in RELATIONS})
        self.k = nn.ModuleDict({r: linear(config.d_h, config.d_i, generator, dtype) for r in RELATIONS})

    def forward(self, M: torch.Tensor, offset: int = 0) -> torch.Tensor:
        """M: (..., n, d_h) -> S: (..., 3, n, n)."""
        n = M.shape[-2]
        pos = torch.arange(n, dtype=torch.float64) + offset
        out = []
        for r in RELATIONS:
            q = apply_rope(self.q[r](M), pos, self.base)
            k = apply_rope(self.k[r](M), pos, self.base)
            out.append(q @ k.transpose(-1, -2) / math.sqrt(self.d_i))
        return torch.stack(out, dim=-3)


def score(M: torch.Tensor, scorer: Scorer, offset: int = 0) -> torch.Tensor:
    return scorer(M, offset)
