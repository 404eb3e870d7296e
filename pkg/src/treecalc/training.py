"""Mini-batch training loop: Adam with decoupled weight decay, plateau halving,
best-on-validation checkpointing and early stopping."""

from __future__ import annotations

import logging
import statistics
import time
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .generate import LabeledEquation
from .model import ModelConfig, TreeModel, loss, predict

log = logging.getLogger(__name__)


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named source of randomness."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@dataclass
class TrainConfig:
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 2e-5
    batch: int = 50
    max_epochs: int = 500
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "eps", "batch", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class OptimState:
    lr: float
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], opt: OptimState,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam update in place, with decoupled weight decay."""
    opt.step += 1
    t = opt.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} vs parameter {p.data.shape}")
        m = opt.m.get(k)
        if m is None:
            m = opt.m[k] = np.zeros_like(p.data)
            opt.v[k] = np.zeros_like(p.data)
        v = opt.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            p.data -= opt.lr * weight_decay * p.data
        p.data -= opt.lr * update


class Plateau:
    """Halve the rate after ``patience`` epochs without a new best."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.stale = 0

    def step(self, value: float) -> float:
        if value > self.best:
            self.best = value
            self.stale = 0
            return 1.0
        self.stale += 1
        if self.stale >= self.patience:
            self.stale = 0
            return 0.5
        return 1.0


def plateau_halve(history: Sequence[float], patience: int) -> float:
    """Multiplier to apply after the last entry of a validation history."""
    if not history:
        raise ValueError("history must be nonempty")
    sched = Plateau(patience)
    mult = 1.0
    for h in history:
        mult = sched.step(h)
    return mult


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_acc: float
    lr: float


@dataclass
class FitResult:
    model: TreeModel
    best_state: dict[str, np.ndarray]
    best_valid_acc: float
    epochs_to_best: int
    log: list[EpochRecord]
    seconds: list[float]

    def restore_best(self) -> TreeModel:
        self.model.params.load_state(self.best_state)
        return self.model


def accuracy(model: TreeModel, items: Sequence[LabeledEquation]) -> float:
    if not items:
        return float("nan")
    hits = sum(predict(model.predict_proba(it.expr)) is it.label for it in items)
    return hits / len(items)


def accumulate_gradients(model: TreeModel, items: Sequence[LabeledEquation],
                         rng: np.random.Generator | None = None) -> float:
    """Add each example's gradient into the parameter buffers; returns summed loss."""
    total = 0.0
    train = model.config.dropout > 0.0
    for it in items:
        tape = Tape()
        out = model.forward(tape, it.expr, train=train, rng=rng)
        l = loss(tape, out, it.label)
        tape.backward(l)
        total += l.item()
    return total


def fit(train: Sequence[LabeledEquation], valid: Sequence[LabeledEquation],
        model_config: ModelConfig, cfg: TrainConfig,
        on_epoch: Callable[[EpochRecord], None] | None = None,
        model: TreeModel | None = None) -> FitResult:
    if not train:
        raise ValueError("empty training split")
    if not valid:
        raise ValueError("empty validation split")
    model = model or TreeModel(model_config, rng=named_rng(cfg.seed, "init"))
    shuffle_rng = named_rng(cfg.seed, "shuffle")
    dropout_rng = named_rng(cfg.seed, "dropout")
    params = list(model.params)
    opt = OptimState(lr=cfg.lr)
    sched = Plateau(cfg.patience)
    best_acc, best_epoch = -1.0, 0
    best_state = model.params.state()
    records: list[EpochRecord] = []
    seconds: list[float] = []
    train = list(train)

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch):
            batch = [train[k] for k in order[start:start + cfg.batch]]
            model.params.zero_grad()
            epoch_loss += accumulate_gradients(model, batch, dropout_rng)
            grads = [p.grad / len(batch) for p in params]
            adam_step(params, grads, opt, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        acc = accuracy(model, valid)
        rec = EpochRecord(epoch, epoch_loss / len(train), acc, opt.lr)
        records.append(rec)
        if acc > best_acc:
            best_acc, best_epoch = acc, epoch
            best_state = model.params.state()
        opt.lr *= sched.step(acc)
        seconds.append(time.perf_counter() - t0)
        if on_epoch:
            on_epoch(rec)
        log.info("epoch %d loss %.4f valid %.4f lr %.3g", epoch, rec.train_loss, acc, rec.lr)
        if epoch - best_epoch >= 3 * cfg.patience:
            break

    return FitResult(model, best_state, best_acc, best_epoch, records, seconds)


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    vals = [float(v) for v in values]
    return statistics.fmean(vals), statistics.pstdev(vals)


def record_dict(rec: EpochRecord) -> dict:
    return asdict(rec)
