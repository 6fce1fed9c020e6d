"""Training loop, AdamW, checkpoints and teacher-to-student transfer."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .config import Config, from_dict
from .decoder import gold_extractions
from .errors import CheckpointError, DataError, DivergenceError
from .metrics import EvalReport, evaluate
from .model import ExtractionModel, LabelCache, batch_losses, forward_matrices, predict
from .schema import Instance, Vocab

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SPCYCKPT"
CHECKPOINT_VERSION = 1


def param_group(name: str) -> str:
    """Encoder parameters form the "plm" group; everything else is "head"."""
    return "plm" if name.startswith("encoder.") else "head"


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    lr: dict[str, float]
    weight_decay: dict[str, float]
    total_steps: int
    warmup_steps: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_grad_norm: float | None = 1.0
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: Config, total_steps: int) -> "OptimizerState":
        return cls(
            lr={"plm": config.plm_learning_rate, "head": config.others_learning_rate},
            weight_decay={"plm": config.plm_weight_decay, "head": config.others_weight_decay},
            total_steps=total_steps,
            warmup_steps=int(math.ceil(config.warmup_proportion * total_steps)),
            betas=(config.adam_beta1, config.adam_beta2),
            eps=config.adam_eps,
            max_grad_norm=config.max_gradient_norm,
        )

    def lr_scale(self, step: int) -> float:
        """Linear warmup to 1 over ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
        if self.warmup_steps and step <= self.warmup_steps:
            return step / self.warmup_steps
        if self.total_steps <= self.warmup_steps:
            return 1.0
        return max(0.0, (self.total_steps - step) / (self.total_steps - self.warmup_steps))

    def meta(self) -> dict:
        return {"lr": self.lr, "weight_decay": self.weight_decay, "total_steps": self.total_steps,
                "warmup_steps": self.warmup_steps, "betas": list(self.betas), "eps": self.eps,
                "max_grad_norm": self.max_grad_norm, "step": self.step}


def clip_grad_norm(grads: Mapping[str, torch.Tensor], max_norm: float | None) -> tuple[dict, float]:
    if not grads:
        return {}, 0.0
    norm = float(torch.linalg.vector_norm(torch.cat([g.detach().double().flatten() for g in grads.values()])))
    if max_norm is None or norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@torch.no_grad()
def adamw_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor],
               state: OptimizerState, group: Callable[[str], str] = param_group) -> float:
    """One in-place AdamW update; returns the pre-clipping gradient norm."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
    grads, norm = clip_grad_norm(grads, state.max_grad_norm)
    state.step += 1
    t = state.step
    scale = state.lr_scale(t)
    b1, b2 = state.betas
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        grp = group(name)
        lr = state.lr[grp] * scale
        if name not in state.exp_avg:
            state.exp_avg[name] = torch.zeros_like(p)
            state.exp_avg_sq[name] = torch.zeros_like(p)
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        p.mul_(1.0 - lr * state.weight_decay[grp])
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.sub_(lr * m_hat / (v_hat.sqrt() + state.eps))
    return norm


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: Config
    vocab: Vocab
    params: "OrderedDict[str, torch.Tensor]"
    seed: int = 0
    epoch: int = 0
    optimizer: OptimizerState | None = None
    version: int = CHECKPOINT_VERSION

    def build_model(self) -> ExtractionModel:
        model = ExtractionModel(self.vocab, self.config, self.seed)
        missing = set(model.state_dict()) ^ set(self.params)
        if missing:
            raise CheckpointError(f"checkpoint parameters do not match the model: {sorted(missing)[:5]}")
        model.load_state_dict(self.params)
        return model

    @classmethod
    def from_model(cls, model: ExtractionModel, seed: int, epoch: int = 0,
                   optimizer: OptimizerState | None = None) -> "Checkpoint":
        params = OrderedDict((k, v.detach().clone()) for k, v in model.state_dict().items())
        return cls(model.config, model.vocab, params, seed, epoch, copy.deepcopy(optimizer))


def _tensor_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().contiguous().numpy()
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    tensors: list[tuple[str, torch.Tensor]] = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    opt_meta = None
    if ckpt.optimizer is not None:
        opt_meta = ckpt.optimizer.meta()
        for k in sorted(ckpt.optimizer.exp_avg):
            tensors.append((f"exp_avg/{k}", ckpt.optimizer.exp_avg[k]))
            tensors.append((f"exp_avg_sq/{k}", ckpt.optimizer.exp_avg_sq[k]))
    entries, blobs, offset = [], [], 0
    for name, t in tensors:
        blob = _tensor_bytes(t)
        entries.append({"name": name, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", ""),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    payload = b"".join(blobs)
    header = {
        "version": ckpt.version,
        "config": ckpt.config.to_dict(),
        "vocab": ckpt.vocab.itos,
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "optimizer": opt_meta,
        "tensors": entries,
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    data = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(head)) + head + payload
    Path(path).write_bytes(data)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    prefix = len(CHECKPOINT_MAGIC) + struct.calcsize("<IQ")
    if len(data) < prefix or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, head_len = struct.unpack("<IQ", data[len(CHECKPOINT_MAGIC):prefix])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    if len(data) < prefix + head_len:
        raise CheckpointError(f"checkpoint {path} is truncated")
    try:
        header = json.loads(data[prefix:prefix + head_len])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CheckpointError(f"checkpoint {path} has a corrupt header") from None
    payload = data[prefix + head_len:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"checkpoint {path} is truncated or corrupt (checksum mismatch)")
    tensors = {}
    for e in header["tensors"]:
        dtype = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(payload, dtype=dtype, count=int(np.prod(e["shape"])), offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.astype(np.dtype(e["dtype"])).reshape(e["shape"]).copy())
    params = OrderedDict((k[len("param/"):], v) for k, v in tensors.items() if k.startswith("param/"))
    optimizer = None
    meta = header.get("optimizer")
    if meta is not None:
        optimizer = OptimizerState(
            lr=meta["lr"], weight_decay=meta["weight_decay"], total_steps=meta["total_steps"],
            warmup_steps=meta["warmup_steps"], betas=tuple(meta["betas"]), eps=meta["eps"],
            max_grad_norm=meta["max_grad_norm"], step=meta["step"])
        for k, v in tensors.items():
            if k.startswith("exp_avg/"):
                optimizer.exp_avg[k[len("exp_avg/"):]] = v
            elif k.startswith("exp_avg_sq/"):
                optimizer.exp_avg_sq[k[len("exp_avg_sq/"):]] = v
    try:
        config = from_dict(header["config"])
    except ValueError as exc:
        raise CheckpointError(f"checkpoint config is invalid: {exc}") from None
    return Checkpoint(config, Vocab.from_list(header["vocab"]), params, header["seed"],
                      header["epoch"], optimizer, version)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    model: ExtractionModel


def gradients(model: ExtractionModel, instances: Sequence[Instance],
              teacher: Mapping[str, np.ndarray] | None = None) -> dict[str, torch.Tensor]:
    """Exact gradient of the batch objective for every named parameter (zeros if unused)."""
    model.zero_grad(set_to_none=True)
    total, _ = batch_losses(model, instances, teacher)
    total.backward()
    return {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for n, p in model.named_parameters()}


def evaluate_model(model: ExtractionModel, instances: Sequence[Instance]) -> EvalReport:
    preds = predict(model, instances)
    golds = {x.id: gold_extractions(x.input, x.gold) for x in instances}
    return evaluate(preds, golds, {x.id: x.input.task for x in instances})


class Trainer:
    """Owns a model and its optimiser state; one ``step`` per mini-batch."""

    def __init__(self, model: ExtractionModel, config: Config, total_steps: int,
                 optimizer: OptimizerState | None = None,
                 teacher: Mapping[str, np.ndarray] | None = None):
        self.model = model
        self.config = config
        self.state = optimizer or OptimizerState.from_config(config, total_steps)
        self.teacher = teacher
        self.labels = LabelCache()

    def step(self, instances: Sequence[Instance]):
        params = dict(self.model.named_parameters())
        self.model.zero_grad(set_to_none=True)
        total, parts = batch_losses(self.model, instances, self.teacher, self.labels)
        if not math.isfinite(total.item()):
            raise DivergenceError(f"non-finite loss at step {self.state.step + 1}")
        total.backward()
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        adamw_step(params, grads, self.state)
        return parts


def _check_teacher(teacher: Mapping[str, np.ndarray] | None, instances: Sequence[Instance]) -> None:
    if not teacher:
        return
    by_id = {x.id: x for x in instances}
    for key, mats in teacher.items():
        if key in by_id:
            n = len(by_id[key].input)
            if tuple(np.shape(mats)) != (3, n, n):
                raise DataError(f"teacher matrices for {key!r} have shape {tuple(np.shape(mats))}, "
                                f"but the input has {n} tokens (tokenizer drift?)")


def _mean_parts(parts: list) -> dict[str, float]:
    keys = ("l_mr", "l_ld", "l_mt")
    out = {k: float(np.mean([getattr(p, k) for p in parts])) for k in keys}
    out["total"] = out["l_mr"] + out["l_ld"] + out["l_mt"]
    return out


def train(
    instances: Sequence[Instance],
    config: Config,
    seed: int = 0,
    dev: Sequence[Instance] | None = None,
    init: Checkpoint | None = None,
    teacher: Mapping[str, np.ndarray] | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Mini-batch training with early stopping on dev micro-F1.

    Without a dev set every configured epoch runs. When ``config.target_train_f1``
    is set, training stops as soon as training-set F1 reaches it.
    """
    if not instances:
        raise DataError("training set is empty")
    torch.set_num_threads(config.num_threads)
    _check_teacher(teacher, instances)
    if init is not None:
        vocab = init.vocab
        model = init.build_model()
        model.config = config
    else:
        vocab = Vocab.from_inputs(x.input for x in instances)
        model = ExtractionModel(vocab, config, seed)
    epochs = config.num_epochs
    steps_per_epoch = math.ceil(len(instances) / config.batch_size)
    trainer = Trainer(model, config, epochs * steps_per_epoch, teacher=teacher)
    rng = np.random.default_rng(seed)
    log: list[dict] = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None

    def emit(record: dict) -> None:
        log.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()

    best_f1, best_ckpt, bad_epochs = -1.0, None, 0
    last_good = Checkpoint.from_model(model, seed, 0, trainer.state)
    try:
        for epoch in range(1, epochs + 1):
            order = rng.permutation(len(instances))
            parts = []
            for k in range(0, len(order), config.batch_size):
                batch = [instances[i] for i in order[k:k + config.batch_size]]
                try:
                    parts.append(trainer.step(batch))
                except DivergenceError as exc:
                    exc.last_good = last_good
                    raise
            record = {"epoch": epoch, "split": "train", **_mean_parts(parts)}
            stop = False
            if config.eval_train or config.target_train_f1 is not None:
                rep = evaluate_model(model, instances)
                record.update(P=rep.overall.precision, R=rep.overall.recall, F1=rep.f1)
                if config.target_train_f1 is not None and rep.f1 >= config.target_train_f1:
                    stop = True
            emit(record)
            last_good = Checkpoint.from_model(model, seed, epoch, trainer.state)
            if dev:
                rep = evaluate_model(model, dev)
                emit({"epoch": epoch, "split": "dev", "P": rep.overall.precision,
                      "R": rep.overall.recall, "F1": rep.f1})
                if rep.f1 > best_f1:
                    best_f1, best_ckpt, bad_epochs = rep.f1, last_good, 0
                else:
                    bad_epochs += 1
                    if bad_epochs >= config.num_patience:
                        logger.info("early stopping after epoch %d", epoch)
                        break
            if stop:
                break
    finally:
        if log_file is not None:
            log_file.close()
    final = best_ckpt if best_ckpt is not None else last_good
    if final is not last_good:
        model = final.build_model()
    return TrainResult(final, log, model)


def export_teacher(checkpoint: Checkpoint | ExtractionModel, instances: Sequence[Instance]) -> dict[str, np.ndarray]:
    """Gated matrices P (3, n, n) of every instance, keyed by id."""
    ids = [x.id for x in instances]
    if len(set(ids)) != len(ids):
        raise DataError("instance ids must be unique to export teacher distributions")
    model = checkpoint.build_model() if isinstance(checkpoint, Checkpoint) else checkpoint
    torch.set_num_threads(model.config.num_threads)
    mats = forward_matrices(model, instances)
    return {k: v["P"] for k, v in mats.items()}


def distill(
    teacher: Mapping[str, np.ndarray],
    instances: Sequence[Instance],
    config: Config,
    seed: int = 0,
    init: Checkpoint | None = None,
    dev: Sequence[Instance] | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Train a student on L_MR + L_LD + L_MT against frozen teacher matrices.

    Instances without a teacher entry contribute no transfer term.
    """
    return train(instances, config, seed, dev=dev, init=init, teacher=teacher, log_path=log_path)


def mean_transfer_loss(model: ExtractionModel, instances: Sequence[Instance],
                       teacher: Mapping[str, np.ndarray]) -> float:
    from .losses import loss_mt

    mats = forward_matrices(model, instances)
    vals = [float(loss_mt(torch.as_tensor(mats[x.id]["P"]), torch.as_tensor(teacher[x.id])))
            for x in instances if x.id in teacher]
    return float(np.mean(vals)) if vals else 0.0


def sample_few_shot(instances: Sequence[Instance], k: int, seed: int = 0) -> list[Instance]:
    """Greedy K-shot sample: every label seen in the data appears in at least k chosen instances."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(instances))
    chosen_idx = []
    need: dict[str, int] = {}
    for inst in instances:
        for t in inst.gold.tuples:
            need[t.label] = k
    for i in order:
        inst = instances[int(i)]
        labels = {t.label for t in inst.gold.tuples}
        if any(need.get(lab, 0) > 0 for lab in labels):
            chosen_idx.append(int(i))
            for lab in labels:
                need[lab] = need.get(lab, 0) - sum(t.label == lab for t in inst.gold.tuples)
        if all(v <= 0 for v in need.values()):
            break
    return [instances[i] for i in sorted(chosen_idx)]
