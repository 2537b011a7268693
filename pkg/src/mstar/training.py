"""Shared mini-batch training loop for classifier/regressor networks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Module
from .losses import cross_entropy, mse
from .optim import Adam, AdamW, ConstantLr, OneCycle, schedule_lr


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"  # adam | adamw
    weight_decay: float = 0.0
    schedule: str = "onecycle"  # onecycle | constant
    loss: str = "ce"  # ce | l2
    seed: int = 0
    shuffle: bool = True


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    final_loss: float = float("nan")


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def fit(net: Module, inputs: np.ndarray, labels: np.ndarray,
        config: TrainConfig) -> TrainResult:
    inputs = np.asarray(inputs, dtype=np.float64)
    n = inputs.shape[0]
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    params = net.parameters()
    if config.optimizer == "adamw":
        opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    else:
        opt = Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    steps_per_epoch = max(1, (n + config.batch_size - 1) // config.batch_size)
    if config.schedule == "onecycle":
        sched = OneCycle(max_lr=config.lr, total_steps=config.epochs * steps_per_epoch)
    else:
        sched = ConstantLr(config.lr)

    net.train(True)
    result = TrainResult()
    step = 0
    for _ in range(config.epochs):
        total, count = 0.0, 0
        for idx in _batches(n, config.batch_size, rng if config.shuffle else None):
            xb = Tensor(inputs[idx])
            out = net(xb)
            if config.loss == "ce":
                loss = cross_entropy(out, labels[idx])
            else:
                loss = mse(out, np.asarray(labels[idx], dtype=np.float64))
            opt.zero_grad()
            ad.backward(loss)
            opt.step(lr=schedule_lr(sched, step))
            step += 1
            total += loss.item() * len(idx)
            count += len(idx)
        result.epoch_losses.append(total / max(1, count))
    result.final_loss = result.epoch_losses[-1] if result.epoch_losses else float("nan")
    return result


def predict_logits(net: Module, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    net.train(False)
    chunks = []
    with ad.no_grad():
        for start in range(0, inputs.shape[0], batch_size):
            chunks.append(net(Tensor(inputs[start:start + batch_size])).data)
    net.train(True)
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0,))


def accuracy(net: Module, inputs: np.ndarray, labels: np.ndarray,
             batch_size: int = 256) -> float:
    logits = predict_logits(net, inputs, batch_size)
    return float((logits.argmax(axis=1) == np.asarray(labels)).mean())
