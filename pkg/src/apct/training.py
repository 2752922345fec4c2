"""Losses, learning-rate schedule, the training loop and evaluation."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .corruption import KINDS, SEVERITIES, cell_name
from .errors import ConfigError, ContractError, FormatError, TrainingDiverged
from .geometry import PointCloud
from .model import ModelConfig, ForwardOutput, forward_groups, init_params, predict_groups, prepare_batch
from .rng import keyed_rng
from .tensor import AdamWState, Tape, Tensor


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 5e-4
    weight_decay: float = 0.05
    warmup_epochs: int = 3
    min_lr: float = 1e-6
    seed: int = 0
    drop: bool = True
    aux: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs must be in [0, epochs), got {self.warmup_epochs}")
        if not self.lr > 0 or self.min_lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive; min_lr and weight_decay non-negative")
        if self.min_lr > self.lr:
            raise ConfigError("min_lr exceeds lr")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    eval_acc: float | None
    lr: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"format": "apct-trainlog/1", "epochs": [dataclasses.asdict(r) for r in self.records]}

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainLog":
        return cls([EpochRecord(**r) for r in doc["epochs"]])

    def deterministic_view(self) -> list[tuple]:
        """Everything except wall-clock time."""
        return [(r.epoch, r.train_loss, r.train_acc, r.eval_acc, r.lr) for r in self.records]


# losses ----------------------------------------------------------------------


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def aux_loss(pred_probs, onehot) -> Tensor:
    """Batch mean of the L2 distance between one-hot labels and predicted probabilities."""
    probs = tn.as_tensor(pred_probs)
    target = np.asarray(onehot, dtype=probs.dtype)
    if probs.ndim != 2 or target.shape != probs.shape:
        raise ContractError(f"aux_loss shapes disagree: {probs.shape} vs {target.shape}")
    return tn.mean_all(tn.row_norm(tn.sub(target, probs)))


def total_loss(logits: Tensor, aux_probs: Sequence[Tensor], labels, weight: float, stages: int = 3) -> Tensor:
    """Cross-entropy plus ``weight`` times the summed auxiliary losses of stages 1..S-1."""
    if len(aux_probs) != stages - 1:
        raise ContractError(f"expected {stages - 1} auxiliary outputs, got {len(aux_probs)}")
    labels = np.asarray(labels, dtype=np.int64)
    loss = tn.cross_entropy(logits, labels)
    if not aux_probs:
        return loss
    target = one_hot(labels, logits.shape[-1], logits.dtype)
    extra = aux_loss(aux_probs[0], target)
    for p in aux_probs[1:]:
        extra = extra + aux_loss(p, target)
    return loss + extra * weight


def loss_for(out: ForwardOutput, labels, cfg: ModelConfig) -> Tensor:
    if not out.aux_probs:
        return tn.cross_entropy(out.logits, np.asarray(labels))
    return total_loss(out.logits, out.aux_probs, labels, cfg.aux_weight, cfg.stages)


# schedule --------------------------------------------------------------------


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return int(round(total_steps * cfg.warmup_epochs / cfg.epochs))


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to ``min_lr`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside 0..{total_steps}")
    warm = warmup_steps(total_steps, cfg)
    if step < warm:
        return cfg.lr * step / warm
    if total_steps == warm:
        return cfg.lr
    frac = (step - warm) / (total_steps - warm)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


# loops -----------------------------------------------------------------------


@dataclass
class GroupedSplit:
    """A split with its patches precomputed (grouping is deterministic per cloud)."""

    ids: list[str]
    labels: np.ndarray
    centers: np.ndarray
    rel: np.ndarray

    @classmethod
    def from_clouds(cls, clouds: Sequence[PointCloud], cfg: ModelConfig) -> "GroupedSplit":
        centers, rel = prepare_batch(clouds, cfg)
        return cls([c.id for c in clouds], np.array([c.label for c in clouds], dtype=np.int64), centers, rel)

    def __len__(self) -> int:
        return len(self.ids)


def effective_config(cfg: ModelConfig, tcfg: TrainConfig) -> ModelConfig:
    return dataclasses.replace(cfg, drop=tcfg.drop, aux_weight=cfg.aux_weight if tcfg.aux else 0.0)


def train_step(params, state, batch_centers, batch_rel, labels, cfg: ModelConfig, rng, lr, weight_decay) -> tuple[float, np.ndarray]:
    with Tape() as tape:
        out = forward_groups(batch_centers, batch_rel, cfg, params, train=True, rng=rng, with_aux=cfg.aux_weight > 0)
        loss = loss_for(out, labels, cfg)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value}")
    grads = tn.backward(tape, loss, params.values())
    tn.adamw_step(params, {k: grads[p] for k, p in params.items()}, state, lr, weight_decay)
    return value, out.logits.data.argmax(axis=-1)


def train(
    cfg: ModelConfig,
    tcfg: TrainConfig,
    train_split: GroupedSplit | Sequence[PointCloud],
    eval_split: GroupedSplit | Sequence[PointCloud] | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[ModelConfig, dict[str, Tensor], TrainLog]:
    """Train from scratch; returns the effective config, parameters and log.

    The ``drop``/``aux`` flags of ``tcfg`` select the ablation cell: both off
    is the plain transformer baseline.
    """
    cfg = effective_config(cfg, tcfg)
    if not isinstance(train_split, GroupedSplit):
        train_split = GroupedSplit.from_clouds(train_split, cfg)
    if eval_split is not None and not isinstance(eval_split, GroupedSplit):
        eval_split = GroupedSplit.from_clouds(eval_split, cfg)

    params = init_params(cfg, tcfg.seed)
    state = AdamWState()
    mask_rng = keyed_rng("masks", tcfg.seed)
    n = len(train_split)
    per_epoch = math.ceil(n / tcfg.batch_size)
    total = per_epoch * tcfg.epochs
    log = TrainLog()
    step = 0
    last_good = {k: v.data.copy() for k, v in params.items()}
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        order = keyed_rng("shuffle", tcfg.seed, epoch).permutation(n)
        losses, correct = [], 0
        for b in range(per_epoch):
            idx = order[b * tcfg.batch_size : (b + 1) * tcfg.batch_size]
            step += 1
            lr = lr_at(step, total, tcfg)
            try:
                value, pred = train_step(
                    params, state, train_split.centers[idx], train_split.rel[idx],
                    train_split.labels[idx], cfg, mask_rng, lr, tcfg.weight_decay,
                )
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"{exc} at step {step}", last_good=last_good, step=step) from exc
            losses.append(value * len(idx))
            correct += int((pred == train_split.labels[idx]).sum())
            if b == per_epoch - 1 or step % 50 == 0:
                last_good = {k: v.data.copy() for k, v in params.items()}
        eval_acc = None
        if eval_split is not None:
            eval_acc = float((predict_groups(eval_split.centers, eval_split.rel, cfg, params) == eval_split.labels).mean())
        rec = EpochRecord(epoch + 1, sum(losses) / n, correct / n, eval_acc, lr, time.perf_counter() - t0)
        log.records.append(rec)
        if on_epoch:
            on_epoch(rec)
    return cfg, params, log


def evaluate(cfg: ModelConfig, params, split: GroupedSplit | Sequence[PointCloud]) -> tuple[np.ndarray, float]:
    """Eval-mode predictions and overall accuracy."""
    if not isinstance(split, GroupedSplit):
        split = GroupedSplit.from_clouds(split, cfg)
    preds = predict_groups(split.centers, split.rel, cfg, params)
    acc = float((preds == split.labels).mean()) if len(split) else 0.0
    return preds, acc


def write_predictions(path, ids: Sequence[str], preds, labels) -> None:
    lines = ["id,pred,label"] + [f"{i},{int(p)},{int(l)}" for i, p, l in zip(ids, preds, labels)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_predictions(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "id,pred,label":
        raise FormatError(f"{path}: missing 'id,pred,label' header")
    ids, preds, labels = [], [], []
    for ln in lines[1:]:
        if not ln.strip():
            continue
        try:
            sid, p, l = ln.split(",")
            preds.append(int(p))
            labels.append(int(l))
        except ValueError as exc:
            raise FormatError(f"{path}: bad record {ln!r}") from exc
        ids.append(sid)
    return ids, np.array(preds, dtype=np.int64), np.array(labels, dtype=np.int64)


def save_log(path, log: TrainLog) -> None:
    Path(path).write_text(json.dumps(log.to_dict(), indent=1) + "\n")


def evaluate_suite(cfg: ModelConfig, params, suite, clean: Sequence[PointCloud] | GroupedSplit, pred_dir=None):
    """Clean accuracy plus the (kind -> five accuracies) grid over a corruption suite.

    When ``pred_dir`` is given, prediction files ``clean.csv`` and
    ``<kind>_<severity>.csv`` are written there.
    """
    if pred_dir is not None:
        pred_dir = Path(pred_dir)
        pred_dir.mkdir(parents=True, exist_ok=True)
    clean = clean if isinstance(clean, GroupedSplit) else GroupedSplit.from_clouds(clean, cfg)
    preds, clean_acc = evaluate(cfg, params, clean)
    if pred_dir is not None:
        write_predictions(pred_dir / "clean.csv", clean.ids, preds, clean.labels)
    grid = {}
    for kind in KINDS:
        grid[kind] = []
        for sev in SEVERITIES:
            split = GroupedSplit.from_clouds(suite.load_cell(kind, sev), cfg)
            preds, acc = evaluate(cfg, params, split)
            grid[kind].append(acc)
            if pred_dir is not None:
                write_predictions(pred_dir / f"{cell_name(kind, sev)}.csv", split.ids, preds, split.labels)
    return clean_acc, grid
