"""Full extraction model: encoder, fusion, relation scorer and label drop."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .config import Config
from .decoder import DecodeBudgetExceeded, Extraction, decode
from .encoder import Encoder
from .fusion import Fusion, patch_features
from .labeldrop import LabelDrop, apply_drop
from .losses import LossBreakdown, loss_ld, loss_mr, loss_mt
from .schema import PAD_ID, Instance, UnifiedInput, Vocab, build_graph_labels, build_label_vectors
from .scorer import Scorer

logger = logging.getLogger(__name__)


@dataclass
class Batch:
    ids: torch.Tensor  # (B, n)
    mask: torch.Tensor  # (B, n) bool
    lengths: list[int]
    patches: torch.Tensor | None  # (B, n_p, d_v)
    has_image: torch.Tensor  # (B,) bool


@dataclass
class Output:
    S: torch.Tensor  # (B, 3, n, n) raw scores
    keep: torch.Tensor  # (B, 3, n)
    P: torch.Tensor  # (B, 3, n, n) gated

    def instance(self, b: int, n: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.S[b, :, :n, :n], self.keep[b, :, :n], self.P[b, :, :n, :n]


class ExtractionModel(nn.Module):
    def __init__(self, vocab: Vocab, config: Config, seed: int = 0):
        super().__init__()
        self.vocab = vocab
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        self.encoder = Encoder(len(vocab), config, gen)
        self.fusion = Fusion(config, gen)
        self.scorer = Scorer(config, gen)
        self.drop = LabelDrop(config, gen)
        self._patch_cache: dict[str, np.ndarray] = {}

    @property
    def dtype(self) -> torch.dtype:
        return getattr(torch, self.config.dtype)

    def _patches(self, image_ref: str) -> np.ndarray:
        if image_ref not in self._patch_cache:
            self._patch_cache[image_ref] = patch_features(image_ref, self.config)
        return self._patch_cache[image_ref]

    def collate(self, inputs: Sequence[UnifiedInput], images: Sequence[str | None] | None = None) -> Batch:
        images = list(images) if images is not None else [None] * len(inputs)
        n = max(len(x) for x in inputs)
        ids = torch.full((len(inputs), n), PAD_ID, dtype=torch.long)
        mask = torch.zeros((len(inputs), n), dtype=torch.bool)
        for b, inp in enumerate(inputs):
            ids[b, :len(inp)] = torch.tensor(self.vocab.encode(inp.seq.surface))
            mask[b, :len(inp)] = True
        has_image = torch.tensor([img is not None for img in images], dtype=torch.bool)
        patches = None
        if bool(has_image.any()) and self.config.alpha > 0:
            feats = np.zeros((len(inputs), self.config.n_patches, self.config.d_v))
            for b, img in enumerate(images):
                if img is not None:
                    feats[b] = self._patches(img)
            patches = torch.tensor(feats, dtype=self.dtype)
        return Batch(ids, mask, [len(x) for x in inputs], patches, has_image)

    def forward(self, batch: Batch) -> Output:
        H = self.encoder(batch.ids, batch.mask)
        M = H
        if batch.patches is not None:
            fused = self.fusion(H, batch.patches, self.config.alpha, batch.mask)
            M = torch.where(batch.has_image[:, None, None], fused, H)
        S = self.scorer(M)
        keep = self.drop(M)
        return Output(S, keep, apply_drop(S, keep))


def pair_mask_for(inp: UnifiedInput, config: Config) -> torch.Tensor | None:
    if config.pair_mask == "all":
        return None
    allowed = np.zeros(len(inp), dtype=bool)
    allowed[list(inp.trigger_positions())] = True
    allowed[inp.mode_position] = True
    allowed[slice(*inp.segments["text"])] = True
    return torch.tensor(allowed[:, None] & allowed[None, :])


class LabelCache:
    """Gold graph labels and keep vectors, computed once per instance."""

    def __init__(self):
        self._cache: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}

    def get(self, inst: Instance, dtype) -> tuple[torch.Tensor, torch.Tensor]:
        key = id(inst)
        if key not in self._cache:
            G = torch.tensor(build_graph_labels(inst.input, inst.gold), dtype=dtype)
            L = torch.tensor(build_label_vectors(inst.input, inst.gold), dtype=dtype)
            self._cache[key] = (G, L, inst)
        return self._cache[key][:2]


def batch_losses(
    model: ExtractionModel,
    instances: Sequence[Instance],
    teacher: Mapping[str, np.ndarray] | None = None,
    labels: LabelCache | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Mean over the batch of L_MR + L_LD + L_MT (L_MT only where a teacher entry exists)."""
    labels = labels or LabelCache()
    cfg = model.config
    batch = model.collate([x.input for x in instances], [x.image for x in instances])
    out = model(batch)
    terms = {"mr": [], "ld": [], "mt": []}
    for b, inst in enumerate(instances):
        n = batch.lengths[b]
        S, keep, P = out.instance(b, n)
        G, L = labels.get(inst, model.dtype)
        terms["mr"].append(loss_mr(S, G, pair_mask_for(inst.input, cfg)))
        terms["ld"].append(loss_ld(keep, L, cfg.bce_eps))
        if teacher is not None and inst.id in teacher:
            target = torch.as_tensor(teacher[inst.id], dtype=model.dtype)
            if tuple(target.shape) != tuple(P.shape):
                raise ValueError(
                    f"teacher matrices for {inst.id!r} have shape {tuple(target.shape)}, "
                    f"student input gives {tuple(P.shape)} (tokenizer drift?)")
            terms["mt"].append(loss_mt(P, target))
    k = len(instances)
    l_mr = torch.stack(terms["mr"]).sum() / k
    l_ld = torch.stack(terms["ld"]).sum() / k
    l_mt = torch.stack(terms["mt"]).sum() / k if terms["mt"] else torch.zeros((), dtype=model.dtype)
    total = l_mr + l_ld + l_mt
    return total, LossBreakdown(l_mr.item(), l_ld.item(), l_mt.item())


@torch.no_grad()
def forward_matrices(model: ExtractionModel, instances: Sequence[Instance],
                     batch_size: int | None = None) -> dict[str, dict[str, np.ndarray]]:
    """Per-instance S, keep and P as numpy arrays, keyed by instance id."""
    batch_size = batch_size or model.config.batch_size
    out = {}
    for k in range(0, len(instances), batch_size):
        chunk = instances[k:k + batch_size]
        batch = model.collate([x.input for x in chunk], [x.image for x in chunk])
        res = model(batch)
        for b, inst in enumerate(chunk):
            S, keep, P = res.instance(b, batch.lengths[b])
            out[inst.id] = {"S": S.double().numpy().copy(), "keep": keep.double().numpy().copy(),
                            "P": P.double().numpy().copy()}
    return out


def predict(model: ExtractionModel, instances: Sequence[Instance],
            matrices: Mapping[str, Mapping[str, np.ndarray]] | None = None) -> dict[str, list[Extraction]]:
    cfg = model.config
    matrices = matrices if matrices is not None else forward_matrices(model, instances)
    out = {}
    for inst in instances:
        try:
            out[inst.id] = decode(matrices[inst.id]["P"], inst.input, cfg.threshold,
                                  cfg.max_pieces, cfg.max_span_len, cfg.decode_budget)
        except DecodeBudgetExceeded:
            logger.warning("decoding %s exceeded the search budget; emitting no extractions", inst.id)
            out[inst.id] = []
    return out
