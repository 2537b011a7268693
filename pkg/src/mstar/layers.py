"""Layer catalogue: conv1d/conv2d, batch norm, activations, pools, linear.

Catalogue kinds and their functional cores:
  conv1d / conv2d        -> autodiff.conv1d / conv2d ("same" padding, stride 1)
  batch-norm (1d/2d)     -> BatchNorm1d / BatchNorm2d
  relu, leaky-relu, sigmoid, tanh -> autodiff activations
  max-pool1d / avg-pool1d -> autodiff.maxpool1d / avgpool1d (stride 1, same)
  global-average-pool / global-max-pool -> GlobalAvgPool1d / GlobalMaxPool1d
  linear, matrix multiply, elementwise add, channel concat -> Linear, matmul,
  add, concat
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Minimal parameter container with explicit registration."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._mods: dict[str, "Module"] = {}
        self.training = True

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def add_module(self, name: str, mod: "Module") -> "Module":
        self._mods[name] = mod
        return mod

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k, v in self._params.items():
            out[prefix + k] = v
        for k, m in self._mods.items():
            out.update(m.parameters(prefix + k + "/"))
        return out

    def train(self, flag: bool = True) -> "Module":
        self.training = flag
        for m in self._mods.values():
            m.train(flag)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for k, p in params.items():
            if k not in state:
                raise KeyError(f"missing parameter '{k}' in state")
            if state[k].shape != p.data.shape:
                raise ValueError(
                    f"shape mismatch for '{k}': {state[k].shape} vs {p.data.shape}")
            p.data = np.asarray(state[k], dtype=np.float64).copy()


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.w = self.add_param("w", kaiming_uniform(rng, (in_features, out_features), in_features))
        self.b = self.add_param("b", np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.w)
        if self.b is not None:
            out = ad.add(out, self.b)
        return out


class Conv1d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        fan_in = in_channels * kernel
        self.w = self.add_param("w", kaiming_uniform(rng, (out_channels, in_channels, kernel), fan_in))
        self.b = self.add_param("b", np.zeros(out_channels)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.conv1d(x, self.w)
        if self.b is not None:
            out = ad.add(out, ad.reshape(self.b, (1, self.out_channels, 1)))
        return out


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        fan_in = in_channels * kernel * kernel
        self.w = self.add_param(
            "w", kaiming_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in))
        self.b = self.add_param("b", np.zeros(out_channels)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.conv2d(x, self.w)
        if self.b is not None:
            out = ad.add(out, ad.reshape(self.b, (1, self.out_channels, 1, 1)))
        return out


class _BatchNorm(Module):
    """Shared batch-norm core; subclasses fix the reduction axes."""

    axes: tuple[int, ...] = ()

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(channels))
        self.beta = self.add_param("beta", np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def _bshape(self, ndim: int):
        shape = [1] * ndim
        shape[1] = self.channels
        return tuple(shape)

    def __call__(self, x: Tensor) -> Tensor:
        bshape = self._bshape(x.data.ndim)
        if self.training:
            mu = ad.tmean(x, axis=self.axes, keepdims=True)
            xc = ad.sub(x, mu)
            var = ad.tmean(ad.mul(xc, xc), axis=self.axes, keepdims=True)
            inv = ad.power(ad.add(var, self.eps), -0.5)
            xhat = ad.mul(xc, inv)
            n = int(np.prod([x.data.shape[a] for a in self.axes]))
            bmu = mu.data.reshape(self.channels)
            bvar = var.data.reshape(self.channels) * (n / max(1, n - 1))
            self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * bmu
            self.running_var = (1 - self.momentum) * self.running_var + self.momentum * bvar
        else:
            mu = self.running_mean.reshape(bshape)
            inv = 1.0 / np.sqrt(self.running_var.reshape(bshape) + self.eps)
            xhat = ad.mul(ad.sub(x, mu), inv)
        return ad.add(ad.mul(xhat, ad.reshape(self.gamma, bshape)),
                      ad.reshape(self.beta, bshape))


class BatchNorm1d(_BatchNorm):
    axes = (0, 2)


class BatchNorm2d(_BatchNorm):
    axes = (0, 2, 3)


class MaxPool1d(Module):
    def __init__(self, kernel: int):
        super().__init__()
        self.kernel = kernel

    def __call__(self, x: Tensor) -> Tensor:
        return ad.maxpool1d(x, self.kernel)


class AvgPool1d(Module):
    def __init__(self, kernel: int):
        super().__init__()
        self.kernel = kernel

    def __call__(self, x: Tensor) -> Tensor:
        return ad.avgpool1d(x, self.kernel)


class GlobalAvgPool1d(Module):
    def __call__(self, x: Tensor) -> Tensor:
        return ad.tmean(x, axis=2)


class GlobalMaxPool1d(Module):
    def __call__(self, x: Tensor) -> Tensor:
        return ad.tmax(x, axis=2)


class GlobalAvgPool2d(Module):
    def __call__(self, x: Tensor) -> Tensor:
        return ad.tmean(x, axis=(2, 3))


class Sequential(Module):
    def __init__(self, *mods: Module):
        super().__init__()
        self.steps = list(mods)
        for i, m in enumerate(mods):
            self.add_module(str(i), m)

    def __call__(self, x: Tensor) -> Tensor:
        for m in self.steps:
            x = m(x)
        return x


def log_softmax(logits: Tensor) -> Tensor:
    # shift by a detached max for stability; the shift cancels in the gradient
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = ad.sub(logits, shift)
    lse = ad.log(ad.tsum(ad.exp(z), axis=1, keepdims=True))
    return ad.sub(z, lse)
