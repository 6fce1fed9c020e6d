"""Image patch features and text-image cross-attention fusion."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from torch import nn

from .config import Config
from .encoder import linear
from .errors import DataError


def load_image(image_ref: str, size: int = 224) -> np.ndarray:
    """RGB array (size, size, 3) in [0, 1] from a file path or a ``synthetic:<seed>`` descriptor."""
    if image_ref.startswith("synthetic:"):
        try:
            seed = int(image_ref.split(":", 1)[1])
        except ValueError:
            raise DataError(f"bad synthetic image descriptor {image_ref!r}") from None
        return np.random.default_rng(seed).random((size, size, 3))
    try:
        with Image.open(Path(image_ref)) as img:
            img = img.convert("RGB").resize((size, size), Image.BILINEAR)
            return np.asarray(img, dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f"cannot read image {image_ref}: {exc}") from None


def patch_projection(d_v: int, seed: int) -> np.ndarray:
    """Fixed (3, d_v) projection standing in for the vision backbone."""
    return np.random.default_rng(seed).standard_normal((3, d_v)) / math.sqrt(3.0)


def image_patch_features(image: np.ndarray, patch_size: int, d_v: int, seed: int = 0) -> np.ndarray:
    h, w, c = image.shape
    if h % patch_size or w % patch_size:
        raise DataError(f"image of size {h}x{w} does not split into {patch_size}px patches")
    grid = image.reshape(h // patch_size, patch_size, w // patch_size, patch_size, c)
    means = grid.mean(axis=(1, 3)).reshape(-1, c)
    return means @ patch_projection(d_v, seed)


def patch_features(image_ref, config: Config) -> np.ndarray:
    """Patch feature matrix (n_p, d_v) for an image path, descriptor, or array."""
    if isinstance(image_ref, np.ndarray):
        image = image_ref
    else:
        image = load_image(str(image_ref), config.image_size)
    return image_patch_features(image, config.patch_size, config.d_v, config.patch_seed)


class Fusion(nn.Module):
    def __init__(self, config: Config, generator: torch.Generator):
        super().__init__()
        dtype = getattr(torch, config.dtype)
        d_h = config.d_h
        self.d_h = d_h
        self.mlp = nn.ModuleList([
            linear(config.d_v, d_h, generator, dtype),
            linear(d_h, d_h, generator, dtype),
            linear(d_h, d_h, generator, dtype),
        ])
        self.q = linear(d_h, d_h, generator, dtype)
        self.k = linear(d_h, d_h, generator, dtype)
        self.v = linear(d_h, d_h, generator, dtype)
        # maps the pooled image vector onto each of max_len positions; truncated to |x|
        self.len_weight = nn.Parameter(torch.empty(config.max_len, dtype=dtype))
        self.len_bias = nn.Parameter(torch.zeros(config.max_len, dtype=dtype))
        with torch.no_grad():
            self.len_weight.uniform_(-1.0, 1.0, generator=generator)

    def image_representation(self, H: torch.Tensor, patches: torch.Tensor,
                             mask: torch.Tensor | None = None) -> torch.Tensor:
        """H: (B, n, d_h), patches: (B, n_p, d_v) -> V: (B, n, d_h), entries in (-1, 1)."""
        x = patches
        for k, layer in enumerate(self.mlp):
            x = layer(x)
            if k < len(self.mlp) - 1:
                x = F.gelu(x)
        Q = self.q(x)
        K, V = self.k(H), self.v(H)
        att = Q @ K.transpose(-1, -2) / math.sqrt(self.d_h)
        if mask is not None:
            att = att.masked_fill(~mask[:, None, :], float("-inf"))
        pooled = torch.tanh(att.softmax(dim=-1) @ V).sum(dim=-2)  # (B, d_h)
        n = H.shape[-2]
        return torch.tanh(self.len_weight[:n, None] * pooled[:, None, :] + self.len_bias[:n, None])

    def forward(self, H, patches, alpha: float, mask=None):
        if alpha == 0 or patches is None:
            return H
        return H + alpha * self.image_representation(H, patches, mask)


def fuse(H: torch.Tensor, V, alpha: float, fusion: Fusion) -> torch.Tensor:
    """Single-instance fusion: H (|x|, d_h), V (n_p, d_v) -> M (|x|, d_h)."""
    if alpha == 0:
        return H
    V = torch.as_tensor(V, dtype=H.dtype)
    return fusion(H[None], V[None], alpha)[0]
