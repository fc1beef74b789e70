"""Joint two-branch training: loss, SGD with momentum, plateau decay, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from . import functional as F
from .codec import Reader, encode_kv, encode_tensor
from .errors import ConfigurationError, FormatError, InputError, NumericalError
from .model import ForwardOutput, ModelConfig, StAbnModel, build_model
from .synth import VideoDataset, batch_iter
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"STABN"
CKPT_VERSION = 1
LR_DECAY_FACTOR = 0.1


@dataclass
class TrainConfig:
    lr_initial: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 16
    epochs_max: int = 30
    plateau_patience: int = 3
    min_rel_improvement: float = 1e-4
    min_lr: float = 1e-6
    seed: int = 0
    max_grad_norm: Optional[float] = None

    @property
    def lr_decay_factor(self) -> float:
        return LR_DECAY_FACTOR

    def validate(self) -> "TrainConfig":
        problems = []
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must lie in [0, 1) (got {self.momentum})")
        if self.lr_initial <= 0:
            problems.append("lr_initial must be > 0")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs_max < 1 or self.plateau_patience < 1:
            problems.append("batch_size, epochs_max and plateau_patience must be >= 1")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            problems.append("max_grad_norm must be > 0 when set")
        if problems:
            raise ConfigurationError("invalid train config: " + "; ".join(problems))
        return self


@dataclass
class LossBreakdown:
    l_att: Tensor
    l_per: Tensor
    l_total: Tensor

    def values(self) -> Dict[str, float]:
        return {"l_att": self.l_att.item(), "l_per": self.l_per.item(), "l_total": self.l_total.item()}


def joint_loss(output: ForwardOutput, labels) -> LossBreakdown:
    """Cross-entropy of both branches, summed with equal weight."""
    l_att = F.softmax_cross_entropy(output.att_logits, labels)
    l_per = F.softmax_cross_entropy(output.per_logits, labels)
    return LossBreakdown(l_att, l_per, l_att + l_per)


# -- optimizer -------------------------------------------------------------------


def decays(name: str) -> bool:
    """Weight decay applies to conv/linear weights only, not biases or norm parameters."""
    return name.endswith(".weight")


def sgd_step(
    params: Dict[str, Tensor],
    velocity: Dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
    max_grad_norm: Optional[float] = None,
) -> None:
    """In-place update ``v = momentum * v + (g + wd * w)``; ``w -= lr * v``."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
    scale = 1.0
    if max_grad_norm is not None:
        total = math.sqrt(sum(float((p.grad**2).sum()) for p in params.values() if p.grad is not None))
        if total > max_grad_norm:
            scale = max_grad_norm / total
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad * scale if scale != 1.0 else p.grad
        if weight_decay and decays(name):
            g = g + weight_decay * p.data
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p.data)
        v *= momentum
        v += g
        p.data -= lr * v


class PlateauSchedule:
    """Multiply the learning rate by 0.1 after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, patience: int, min_rel_improvement: float = 1e-4):
        self.lr = lr
        self.patience = patience
        self.min_rel_improvement = min_rel_improvement
        self.best = math.inf
        self.bad_epochs = 0

    def improved(self, loss: float) -> bool:
        if not math.isfinite(self.best):
            return True
        return loss < self.best - abs(self.best) * self.min_rel_improvement

    def step(self, loss: float) -> bool:
        """Record one validation loss; returns True if it is a new best."""
        if self.improved(loss):
            self.best = loss
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr = self.lr * LR_DECAY_FACTOR
            self.bad_epochs = 0
        return False


# -- evaluation --------------------------------------------------------------


@dataclass
class EvalResult:
    l_att: float
    l_per: float
    l_total: float
    top1: float
    count: int


def evaluate(model: StAbnModel, dataset: VideoDataset, batch_size: int = 32) -> EvalResult:
    """Evaluation-mode pass over ``dataset``; parameters and norm statistics are untouched."""
    if len(dataset) == 0:
        raise InputError("cannot evaluate an empty dataset")
    sums = np.zeros(2)
    correct = 0
    for batch in batch_iter(dataset, batch_size):
        out = model.infer(batch.videos)
        n = len(batch.labels)
        with no_grad():
            losses = joint_loss(out, batch.labels)
        sums += n * np.array([losses.l_att.item(), losses.l_per.item()])
        correct += int((out.per_logits.data.argmax(axis=1) == batch.labels).sum())
    n = len(dataset)
    l_att, l_per = sums / n
    return EvalResult(float(l_att), float(l_per), float(l_att + l_per), correct / n, n)


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    best_val_loss: float = math.inf
    lr: float = 0.0
    rng_state: Optional[dict] = None


def snapshot(model: StAbnModel, velocity=None, epoch=0, best_val_loss=math.inf, lr=0.0, rng=None) -> Checkpoint:
    return Checkpoint(
        model.config,
        {name: p.data.copy() for name, p in model.named_parameters()},
        {name: b.copy() for name, b in model.named_buffers().items()},
        {name: v.copy() for name, v in (velocity or {}).items()},
        epoch,
        best_val_loss,
        lr,
        rng.bit_generator.state if rng is not None else None,
    )


def restore(ckpt: Checkpoint) -> StAbnModel:
    """Rebuild a model from a checkpoint (initialization is overwritten)."""
    model = build_model(ckpt.model_config, 0)
    params = dict(model.named_parameters())
    if set(params) != set(ckpt.params):
        missing = sorted(set(params) ^ set(ckpt.params))
        raise FormatError(f"checkpoint parameters do not match the model topology: {missing[:5]}")
    for name, p in params.items():
        if p.shape != ckpt.params[name].shape:
            raise FormatError(f"parameter {name!r}: shape {ckpt.params[name].shape}, model expects {p.shape}")
        p.data = ckpt.params[name].copy()
    for name, value in ckpt.buffers.items():
        model.set_buffer(name, value)
    return model


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = dict(ckpt.model_config.to_dict())
    header["train.epoch"] = str(ckpt.epoch)
    header["train.best_val_loss"] = repr(float(ckpt.best_val_loss))
    header["train.lr"] = repr(float(ckpt.lr))
    header["train.rng"] = json.dumps(ckpt.rng_state, sort_keys=True) if ckpt.rng_state else ""
    tensors = (
        [(f"param/{k}", v) for k, v in ckpt.params.items()]
        + [(f"buffer/{k}", v) for k, v in ckpt.buffers.items()]
        + [(f"velocity/{k}", v) for k, v in ckpt.velocity.items()]
    )
    parts = [CKPT_MAGIC, bytes([CKPT_VERSION]), encode_kv(header), struct.pack("<I", len(tensors))]
    parts += [encode_tensor(name, value) for name, value in tensors]
    return b"".join(parts)


def decode_checkpoint(data: bytes, what: str = "checkpoint") -> Checkpoint:
    r = Reader(data, what)
    r.expect_magic(CKPT_MAGIC, CKPT_VERSION)
    header = r.kv()
    try:
        config = ModelConfig.from_dict(header)
        epoch = int(header["train.epoch"])
        best = float(header["train.best_val_loss"])
        lr = float(header["train.lr"])
        rng_state = json.loads(header["train.rng"]) if header.get("train.rng") else None
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{what}: malformed header ({exc})") from exc
    groups = {"param": {}, "buffer": {}, "velocity": {}}
    for _ in range(r.u32()):
        name, value = r.tensor()
        kind, _, key = name.partition("/")
        if kind not in groups:
            raise FormatError(f"{what}: unknown tensor group in {name!r}")
        groups[kind][key] = value
    if not r.at_end():
        raise FormatError(f"{what}: {len(data) - r.pos} trailing bytes")
    return Checkpoint(config, groups["param"], groups["buffer"], groups["velocity"], epoch, best, lr, rng_state)


def save_checkpoint(path: Union[str, Path], ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data, str(path))


# -- training loop -------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_l_att: float
    train_l_per: float
    train_l_total: float
    val_l_total: float
    val_top1: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


@dataclass
class TrainResult:
    log: List[EpochRecord]
    best: Checkpoint
    model: StAbnModel


def train(
    model: StAbnModel,
    train_set: VideoDataset,
    val_set: VideoDataset,
    config: TrainConfig,
    callbacks: Sequence[Callable[[EpochRecord], None]] = (),
    checkpoint_path: Union[str, Path, None] = None,
    log_path: Union[str, Path, None] = None,
) -> TrainResult:
    """Optimize ``model`` in place on the joint loss; keeps the best-validation checkpoint.

    The shuffle order and dropout masks both come from one generator seeded
    with ``config.seed``, so a fixed seed reproduces the log bit for bit.
    A callback that returns True ends training after the current epoch.
    """
    config.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise InputError("training and validation sets must be non-empty")
    rng = np.random.default_rng(config.seed)
    params = dict(model.named_parameters())
    velocity: Dict[str, np.ndarray] = {}
    schedule = PlateauSchedule(config.lr_initial, config.plateau_patience, config.min_rel_improvement)
    log: List[EpochRecord] = []
    best = snapshot(model, velocity, 0, math.inf, schedule.lr, rng)
    log_file = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(1, config.epochs_max + 1):
            lr = schedule.lr
            started = time.perf_counter()
            sums = np.zeros(3)
            for batch in batch_iter(train_set, config.batch_size, rng):
                out = model.forward(batch.videos, training=True, rng=rng)
                losses = joint_loss(out, batch.labels)
                values = losses.values()
                if not all(math.isfinite(v) for v in values.values()):
                    raise NumericalError(f"non-finite loss at epoch {epoch}: {values}")
                model.zero_grad()
                losses.l_total.backward()
                sgd_step(params, velocity, lr, config.momentum, config.weight_decay, config.max_grad_norm)
                sums += len(batch.labels) * np.array([values["l_att"], values["l_per"], values["l_total"]])
            train_means = sums / len(train_set)
            val = evaluate(model, val_set, max(config.batch_size, 32))
            record = EpochRecord(epoch, lr, *map(float, train_means), val.l_total, val.top1)
            log.append(record)
            if log_file:
                log_file.write(record.to_json() + "\n")
                log_file.flush()
            logger.info(
                "epoch %d lr %.2g train %.4f val %.4f top1 %.4f (%.1fs)",
                epoch, lr, record.train_l_total, val.l_total, val.top1, time.perf_counter() - started,
            )
            if schedule.step(val.l_total):
                best = snapshot(model, velocity, epoch, val.l_total, lr, rng)
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, best)
            stop = False
            for cb in callbacks:
                stop = bool(cb(record)) or stop
            if stop or schedule.lr < config.min_lr:
                break
    finally:
        if log_file:
            log_file.close()
    return TrainResult(log, best, model)
