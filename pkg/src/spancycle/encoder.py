"""Small pre-norm transformer encoder standing in for a pretrained LM."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import Config
from .errors import ConfigError, DataError


def uniform_fan_in_(weight: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    bound = 1.0 / math.sqrt(weight.shape[1])
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)
    return weight


def linear(d_in: int, d_out: int, generator: torch.Generator, dtype, bias: bool = True) -> nn.Linear:
    layer = nn.Linear(d_in, d_out, bias=bias, dtype=dtype)
    uniform_fan_in_(layer.weight, generator)
    if bias:
        nn.init.zeros_(layer.bias)
    return layer


class Block(nn.Module):
    def __init__(self, d_h: int, n_heads: int, generator: torch.Generator, dtype):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d_h, dtype=dtype)
        self.qkv = linear(d_h, 3 * d_h, generator, dtype)
        self.out = linear(d_h, d_h, generator, dtype)
        self.ln2 = nn.LayerNorm(d_h, dtype=dtype)
        self.ff1 = linear(d_h, 4 * d_h, generator, dtype)
        self.ff2 = linear(4 * d_h, d_h, generator, dtype)

    def attention(self, x: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
        B, n, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(x).split(d, dim=-1)
        q, k, v = (t.view(B, n, self.n_heads, hd).transpose(1, 2) for t in (q, k, v))
        att = q @ k.transpose(-1, -2) / math.sqrt(hd)
        if mask is not None:
            att = att.masked_fill(~mask[:, None, None, :], float("-inf"))
        att = att.softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, n, d)
        return self.out(y)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.attention(self.ln1(x), mask)
        return x + self.ff2(F.gelu(self.ff1(self.ln2(x))))


class Encoder(nn.Module):
    def __init__(self, vocab_size: int, config: Config, generator: torch.Generator):
        super().__init__()
        dtype = getattr(torch, config.dtype)
        self.max_len = config.max_len
        self.tok_emb = nn.Embedding(vocab_size, config.d_h, dtype=dtype)
        self.pos_emb = nn.Embedding(config.max_len, config.d_h, dtype=dtype)
        with torch.no_grad():
            self.tok_emb.weight.normal_(0.0, 0.02, generator=generator)
            self.pos_emb.weight.normal_(0.0, 0.02, generator=generator)
        self.blocks = nn.ModuleList(
            Block(config.d_h, config.n_heads, generator, dtype) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_h, dtype=dtype)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """ids: (B, n) -> hidden states (B, n, d_h)."""
        n = ids.shape[-1]
        if n > self.max_len:
            raise DataError(f"input length {n} exceeds max_len={self.max_len}")
        x = self.tok_emb(ids) + self.pos_emb(torch.arange(n))
        for block in self.blocks:
            x = block(x, mask)
        return self.ln_f(x)


def init_encoder(config: Config, seed: int, vocab_size: int = 64) -> Encoder:
    if config.d_h % config.n_heads:
        raise ConfigError(f"d_h={config.d_h} is not divisible by n_heads={config.n_heads}")
    return Encoder(vocab_size, config, torch.Generator().manual_seed(seed))


def encode(ids, encoder: Encoder) -> torch.Tensor:
    """Hidden states (|x|, d_h) for a single token-id sequence."""
    ids = torch.as_tensor(ids, dtype=torch.long)
    return encoder(ids[None])[0]
