"""AdamW, warmup-cosine schedule, and the epoch-based training loop."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, NumericError
from .model import CSFM, Example, group_batches
from .tensor import Tensor
from .tokens import DEFAULT_MASK_RATIO, MaskMode, sample_mask

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 16
    n_steps: int = 1000
    warmup_steps: int = 50
    grad_clip_norm: float | None = 1.0
    seed: int = 0
    eval_every: int = 0
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0 <= self.warmup_steps <= self.n_steps:
            raise ConfigError(f"warmup_steps must lie in [0, n_steps], got {self.warmup_steps}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to 0.1 * lr at n_steps."""
    if config.warmup_steps and step < config.warmup_steps:
        return config.lr * step / config.warmup_steps
    span = config.n_steps - config.warmup_steps
    progress = 1.0 if span <= 0 else min((step - config.warmup_steps) / span, 1.0)
    return config.lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * progress)))


def clip_grad_norm(params: Sequence[Tensor], max_norm: float | None) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm is not None and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= p.dtype.type(factor)
    return total


class AdamW:
    """Adam with decoupled weight decay (applied to matrices only)."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                update = update + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Objective(Protocol):
    def loss(self, model: CSFM, batch: Sequence[Example], rng: np.random.Generator) -> Tensor: ...


def weighted_group_loss(batch: Sequence[Example], group_loss) -> Tensor:
    """Mean over records of per-record losses, computed group by group."""
    total = None
    for group in group_batches(batch):
        part = T.scale(group_loss(group), len(group) / len(batch))
        total = part if total is None else T.add(total, part)
    return total


@dataclasses.dataclass
class PretrainObjective:
    mode: MaskMode | str = MaskMode.MIXED
    ratio: float = DEFAULT_MASK_RATIO

    def loss(self, model: CSFM, batch: Sequence[Example], rng: np.random.Generator) -> Tensor:
        def group_loss(group):
            plans = [sample_mask(ex.grid, self.mode, self.ratio, seed=int(rng.integers(2**31))) for ex in group]
            return model.pretrain_loss(group, plans)

        return weighted_group_loss(batch, group_loss)


@dataclasses.dataclass
class TrainResult:
    model: CSFM
    loss_curve: list[float]
    config: TrainConfig

    def save_curve(self, path) -> None:
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(json.dumps({"config": self.config.to_dict(), "loss": self.loss_curve}, indent=2))
            return
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "loss"])
            for i, v in enumerate(self.loss_curve):
                writer.writerow([i, repr(v)])


def train(model: CSFM, objective: Objective, examples: Sequence[Example], config: TrainConfig, params: Sequence[Tensor] | None = None) -> TrainResult:
    """Optimize ``objective`` over ``examples`` for ``config.n_steps`` steps.

    Records are visited in a fresh seeded permutation each epoch, so every
    record is used exactly once per epoch.
    """
    if not examples:
        raise DataError("no training examples")
    params = list(params) if params is not None else model.parameters()
    opt = AdamW(params, betas=config.betas, eps=config.eps, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    queue: list[int] = []
    curve: list[float] = []
    for step in range(config.n_steps):
        if not queue:
            queue = rng.permutation(len(examples)).tolist()
        take, queue = queue[: config.batch_size], queue[config.batch_size:]
        batch = [examples[i] for i in take]
        try:
            with T.Tape() as tape:
                loss = objective.loss(model, batch, rng)
            tape.backward(loss)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}", op=exc.op, step=step) from exc
        clip_grad_norm(params, config.grad_clip_norm)
        opt.step(lr_at(step, config))
        opt.zero_grad()
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"step {step}: loss is not finite", op="loss", step=step)
        curve.append(value)
        if config.eval_every and (step + 1) % config.eval_every == 0:
            logger.info("step %d loss %.5f", step + 1, value)
    return TrainResult(model, curve, config)


def pretrain(model: CSFM, examples: Sequence[Example], config: TrainConfig, mode=MaskMode.MIXED, ratio=DEFAULT_MASK_RATIO) -> TrainResult:
    return train(model, PretrainObjective(mode, ratio), examples, config)
