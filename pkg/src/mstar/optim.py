"""Adam/AdamW, the one-cycle learning-rate schedule, and gradient checking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Adam:
    """Adam with bias correction; ``decoupled=True`` gives AdamW weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled: bool = False):
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            mhat = self.m[k] / c1
            vhat = self.v[k] / c2
            if self.weight_decay and self.decoupled:
                p.data = p.data - lr * self.weight_decay * p.data
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


class AdamW(Adam):
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        super().__init__(params, lr=lr, betas=betas, eps=eps,
                         weight_decay=weight_decay, decoupled=True)


@dataclass(frozen=True)
class OneCycle:
    """Linear ramp to ``max_lr`` over the warmup fraction, cosine decay after."""

    max_lr: float
    total_steps: int
    warmup_frac: float = 0.3
    start_div: float = 25.0
    final_div: float = 1e4

    def lr(self, step: int) -> float:
        step = min(max(step, 0), self.total_steps)
        warm = self.warmup_frac * self.total_steps
        lo = self.max_lr / self.start_div
        end = self.max_lr / self.final_div
        if warm > 0 and step <= warm:
            return lo + (self.max_lr - lo) * (step / warm)
        if self.total_steps == warm:
            return self.max_lr
        t = (step - warm) / (self.total_steps - warm)
        return end + 0.5 * (self.max_lr - end) * (1.0 + math.cos(math.pi * t))


@dataclass(frozen=True)
class ConstantLr:
    value: float

    def lr(self, step: int) -> float:
        return self.value


def schedule_lr(sched, step: int) -> float:
    """Learning rate at ``step``; out-of-range steps clamp to the end value."""
    return sched.lr(step)


def grad_check(fn, params: dict[str, Tensor], h: float = 1e-5,
               rng: np.random.Generator | None = None,
               max_entries_per_param: int | None = None) -> float:
    """Compare reverse-mode gradients of ``fn()`` against central differences.

    ``fn`` must rebuild its graph on every call and return a scalar Tensor.
    Returns max over checked entries of |g_ad - g_fd| / max(1, |g_fd|).
    Large parameters can be spot-checked by capping entries per tensor.
    """
    for p in params.values():
        p.zero_grad()
    out = fn()
    ad.backward(out)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = 0.0
    for k, p in params.items():
        n = p.data.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idxs = range(n)
        flat = p.data.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            with ad.no_grad():
                f_plus = fn().item()
            flat[i] = orig - h
            with ad.no_grad():
                f_minus = fn().item()
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2 * h)
            g_ad = analytic[k].reshape(-1)[i]
            rel = abs(g_ad - g_fd) / max(1.0, abs(g_fd))
            if rel > worst:
                worst = rel
    return worst
