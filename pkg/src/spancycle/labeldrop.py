"""Keep-vector prediction, column gating and the random-drop ablation."""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .config import Config
from .encoder import linear
from .schema import RELATIONS

DROP_SENTINEL = -1e9


class LabelDrop(nn.Module):
    def __init__(self, config: Config, generator: torch.Generator):
        super().__init__()
        dtype = getattr(torch, config.dtype)
        self.proj = nn.ModuleDict({r: linear(config.d_h, 1, generator, dtype) for r in RELATIONS})

    def forward(self, M: torch.Tensor) -> torch.Tensor:
        """M: (..., n, d_h) -> keep probabilities (..., 3, n)."""
        return torch.stack([torch.sigmoid(self.proj[r](M)[..., 0]) for r in RELATIONS], dim=-2)


def predict_keep(M: torch.Tensor, drop: LabelDrop) -> torch.Tensor:
    return drop(M)


def apply_drop(S, keep):
    """P[r, i, j] = keep[r, j] * S[r, i, j]: scale column j by its keep probability."""
    return keep[..., None, :] * S


def random_drop(S: np.ndarray, rate: float, seed: int) -> np.ndarray:
    """Overwrite floor(rate * n^2) uniformly chosen entries of each matrix with a sentinel."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"drop rate must lie in [0, 1], got {rate}")
    S = np.array(S, dtype=np.float64, copy=True)
    n = S.shape[-1]
    k = int(np.floor(rate * n * n + 1e-9))
    rng = np.random.default_rng(seed)
    for r in range(S.shape[0]):
        idx = rng.choice(n * n, size=k, replace=False)
        S[r].reshape(-1)[idx] = DROP_SENTINEL
    return S


def drop_accuracy(keep_pred: np.ndarray, labels: np.ndarray) -> dict[str, float]:
    """Agreement between row-repeated, 0.5-binarized keep vectors and graph labels."""
    keep_pred = np.asarray(keep_pred, dtype=np.float64)
    labels = np.asarray(labels)
    n = labels.shape[-1]
    out = {}
    for r, name in enumerate(RELATIONS):
        A = np.repeat(keep_pred[r][None, :], n, axis=0) >= 0.5
        out[name] = float(np.mean(A == (labels[r] == 1))) if n else 1.0
    out["mean"] = float(np.mean([out[r] for r in RELATIONS]))
    return out
