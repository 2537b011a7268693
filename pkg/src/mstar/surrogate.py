"""Architecture-performance surrogates.

The main embedding model is a convolutional autoencoder over the 4x13x13
cell tensor: one conv+BN+ReLU block produces a feature map O, the embedding
is the spatial global average of O, and the decoder reshapes O into a
row-per-node matrix M, forms the 13x13 node-affinity Gram matrix M M^T and
lifts it back to 4 channels with a pointwise conv under a ReLU. A linear
sigmoid head ensemble predicts normalized scores from frozen embeddings.
Two baselines are included for comparison experiments: a message-passing
variational autoencoder and an end-to-end convolutional predictor.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericsError, Tensor
from .layers import (BatchNorm1d, BatchNorm2d, Conv2d, GlobalAvgPool2d,
                     Linear, Module)
from .losses import kl_diag_gaussian, mse
from .optim import Adam, OneCycle, schedule_lr
from .space import N_CHANNELS, N_NODES, CellMatrix


def stack_matrices(matrices) -> np.ndarray:
    return np.stack([np.asarray(m.ops, dtype=np.float64) for m in matrices])


def params_hash(module: Module) -> str:
    digest = hashlib.sha256()
    for name in sorted(module.parameters()):
        digest.update(name.encode())
        digest.update(module.parameters()[name].data.tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# convolutional autoencoder


class CaeModel(Module):
    """Encoder conv block + global average embedding + Gram-matrix decoder."""

    def __init__(self, width: int = 2300, kernel: int = 3,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.width = width
        self.conv = self.add_module("conv", Conv2d(N_CHANNELS, width, kernel, rng))
        self.bn = self.add_module("bn", BatchNorm2d(width))
        self.gap = GlobalAvgPool2d()
        self.lift = self.add_module("lift", Conv2d(1, N_CHANNELS, 1, rng))

    def feature_map(self, a: Tensor) -> Tensor:
        return ad.relu(self.bn(self.conv(a)))

    def embed(self, a: Tensor) -> Tensor:
        return self.gap(self.feature_map(a))

    def decode(self, o: Tensor) -> Tensor:
        b = o.data.shape[0]
        m = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (b, N_NODES, self.width * N_NODES))
        gram = ad.matmul(m, ad.transpose(m, (0, 2, 1)))
        return ad.relu(self.lift(ad.reshape(gram, (b, 1, N_NODES, N_NODES))))

    def __call__(self, a: Tensor) -> tuple[Tensor, Tensor]:
        o = self.feature_map(a)
        return self.gap(o), self.decode(o)


def cae_forward(model: CaeModel, matrix: CellMatrix) -> dict:
    """Embedding and reconstruction for a single cell (inference mode)."""
    was_training = model.training
    model.train(False)
    with ad.no_grad():
        v, recon = model(Tensor(stack_matrices([matrix])))
    model.train(was_training)
    return {"v": v.data[0], "recon": recon.data[0]}


def embed_matrices(model: CaeModel, arrays: np.ndarray,
                   batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.train(False)
    outs = []
    with ad.no_grad():
        for start in range(0, arrays.shape[0], batch_size):
            outs.append(model.embed(Tensor(arrays[start:start + batch_size])).data)
    model.train(was_training)
    return np.concatenate(outs, axis=0)


@dataclass(frozen=True)
class AutoencoderTrainConfig:
    width: int = 64
    epochs: int = 15
    batch_size: int = 256
    lr: float = 1e-2
    test_fraction: float = 0.01
    seed: int = 0
    latent: int = 64       # VAE only
    hidden: int = 64       # VAE only
    decoder_rank: int = 16  # VAE only
    lr_vae: float = 1e-3


@dataclass
class AutoencoderTrainResult:
    history: list[tuple[int, float, float]] = field(default_factory=list)
    untrained_test_loss: float = float("nan")
    final_test_loss: float = float("nan")


def _split(n: int, test_fraction: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_test = max(1, int(round(n * test_fraction))) if n > 1 else 0
    return order[n_test:], order[:n_test]


def _eval_recon_loss(model, arrays: np.ndarray, batch_size: int,
                     forward) -> float:
    was_training = model.training
    model.train(False)
    total, count = 0.0, 0
    with ad.no_grad():
        for start in range(0, arrays.shape[0], batch_size):
            xb = arrays[start:start + batch_size]
            loss = forward(Tensor(xb))
            total += loss.item() * len(xb)
            count += len(xb)
    model.train(was_training)
    return total / max(1, count)


def train_cae(corpus, config: AutoencoderTrainConfig) -> tuple[CaeModel, AutoencoderTrainResult]:
    """Fit the autoencoder on cell tensors with an L2 reconstruction loss."""
    arrays = corpus if isinstance(corpus, np.ndarray) else stack_matrices(corpus)
    if arrays.shape[0] < 1:
        raise ValueError("empty training corpus")
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    model = CaeModel(width=config.width, rng=rng)
    train_idx, test_idx = _split(arrays.shape[0], config.test_fraction, rng)
    if len(train_idx) == 0:
        train_idx = test_idx  # single-sample corpora overfit on themselves
    train, test = arrays[train_idx], arrays[test_idx]
    test_eval = test if len(test) else train

    def recon_loss(xb: Tensor):
        _, recon = model(xb)
        return mse(recon, xb.data)

    result = AutoencoderTrainResult()
    result.untrained_test_loss = _eval_recon_loss(model, test_eval,
                                                  config.batch_size, recon_loss)
    opt = Adam(model.parameters(), lr=config.lr)
    steps_per_epoch = max(1, (len(train) + config.batch_size - 1) // config.batch_size)
    sched = OneCycle(max_lr=config.lr, total_steps=config.epochs * steps_per_epoch)
    step = 0
    model.train(True)
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        for start in range(0, len(train), config.batch_size):
            xb = train[order[start:start + config.batch_size]]
            loss = recon_loss(Tensor(xb))
            opt.zero_grad()
            ad.backward(loss)
            opt.step(lr=schedule_lr(sched, step))
            step += 1
            total += loss.item() * len(xb)
            count += len(xb)
        test_loss = _eval_recon_loss(model, test_eval, config.batch_size, recon_loss)
        result.history.append((epoch, total / max(1, count), test_loss))
    result.final_test_loss = result.history[-1][2]
    return model, result


# ---------------------------------------------------------------------------
# linear predictor ensemble


class PredictorEnsemble(Module):
    """Independently initialized linear+sigmoid heads over frozen embeddings."""

    def __init__(self, n_heads: int, embed_dim: int, rng: np.random.Generator):
        super().__init__()
        if n_heads < 1:
            raise ValueError("need at least one head")
        self.n_heads = n_heads
        self.embed_dim = embed_dim
        self.heads = [self.add_module(f"head{i}", Linear(embed_dim, 1, rng))
                      for i in range(n_heads)]

    def __call__(self, v: Tensor) -> Tensor:
        outs = [ad.sigmoid(head(v)) for head in self.heads]
        return ad.concat(outs, axis=1)  # (B, n_heads)

    def predict(self, v: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self(Tensor(np.atleast_2d(v))).data


def predictor_fit(ensemble: PredictorEnsemble, embeddings: np.ndarray,
                  labels: np.ndarray, epochs: int, lr: float = 1e-3,
                  batch_size: int = 16,
                  rng: np.random.Generator | None = None) -> PredictorEnsemble:
    """Train every head on the same (embedding, label) stream with L2 loss.

    Head losses are separable, so one joint pass is identical to training
    each head independently; diversity comes from initialization only.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size and (labels.min() < 0.0 or labels.max() > 1.0):
        raise ValueError("labels must be normalized to [0,1]")
    if epochs <= 0:
        return ensemble
    rng = rng if rng is not None else np.random.default_rng(0)
    opt = Adam(ensemble.parameters(), lr=lr)
    target = np.repeat(labels[:, None], ensemble.n_heads, axis=1)
    n = embeddings.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out = ensemble(Tensor(embeddings[idx]))
            loss = mse(out, target[idx])
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
    return ensemble


def ensemble_stats(ensemble: PredictorEnsemble, embedding: np.ndarray) -> tuple[float, float]:
    """Sample mean and (n-1)-denominator standard deviation of head outputs."""
    if ensemble.n_heads < 2:
        raise ValueError("ensemble std needs at least two heads")
    outs = ensemble.predict(embedding)[0]
    return float(outs.mean()), float(outs.std(ddof=1))


# ---------------------------------------------------------------------------
# message-passing VAE baseline


class VaeModel(Module):
    """Per-operation message passing encoder with a Gram-matrix decoder."""

    def __init__(self, hidden: int = 128, latent: int = 64, decoder_rank: int = 16,
                 n_layers: int = 5, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if hidden % N_CHANNELS:
            raise ValueError("hidden width must split across the 4 operations")
        self.hidden = hidden
        self.latent = latent
        self.rank = decoder_rank
        self.n_layers = n_layers
        self.w_enc = self.add_param(
            "w_enc", np.sqrt(1.0 / N_NODES) * rng.standard_normal((N_NODES, hidden)))
        self.eps = [self.add_param(f"eps{i}", np.zeros(1)) for i in range(n_layers)]
        self.mlp1 = [self.add_module(f"mlp1_{i}", Linear(hidden, hidden, rng))
                     for i in range(n_layers)]
        self.bn1 = [self.add_module(f"bn1_{i}", BatchNorm1d(hidden))
                    for i in range(n_layers)]
        self.mlp2 = [self.add_module(f"mlp2_{i}", Linear(hidden, hidden, rng))
                     for i in range(n_layers)]
        self.bn2 = [self.add_module(f"bn2_{i}", BatchNorm1d(hidden))
                    for i in range(n_layers)]
        self.mu_head = self.add_module("mu", Linear(N_NODES * hidden, latent, rng))
        self.logvar_head = self.add_module("logvar", Linear(N_NODES * hidden, latent, rng))
        self.dec = [self.add_module(f"dec{j}", Linear(latent, N_NODES * decoder_rank, rng))
                    for j in range(N_CHANNELS)]

    def _mlp(self, i: int, h: Tensor) -> Tensor:
        # run linear+BN+leaky-ReLU twice on node vectors flattened to rows
        b = h.data.shape[0]

        def block(lin, bn, t):
            t = lin(ad.reshape(t, (b * N_NODES, self.hidden)))
            t = bn(ad.reshape(t, (b * N_NODES, self.hidden, 1)))
            return ad.leaky_relu(t)

        h = block(self.mlp1[i], self.bn1[i], h)
        h = block(self.mlp2[i], self.bn2[i], h)
        return ad.reshape(h, (b, N_NODES, self.hidden))

    def encode(self, a: Tensor) -> tuple[Tensor, Tensor]:
        b = a.data.shape[0]
        part = self.hidden // N_CHANNELS
        adj = [Tensor(a.data[:, j]) for j in range(N_CHANNELS)]
        h = None
        for j in range(N_CHANNELS):
            term = ad.matmul(adj[j], self.w_enc)
            h = term if h is None else ad.add(h, term)
        for i in range(self.n_layers):
            pieces = []
            for j in range(N_CHANNELS):
                hj = ad.slice_axis(h, 2, j * part, (j + 1) * part)
                mixed = ad.add(ad.mul(ad.add(1.0, self.eps[i]), hj),
                               ad.matmul(adj[j], hj))
                pieces.append(mixed)
            h = self._mlp(i, ad.concat(pieces, axis=2))
        flat = ad.reshape(h, (b, N_NODES * self.hidden))
        return self.mu_head(flat), self.logvar_head(flat)

    def decode(self, v: Tensor) -> Tensor:
        b = v.data.shape[0]
        grams = []
        for j in range(N_CHANNELS):
            z = ad.reshape(self.dec[j](v), (b, N_NODES, self.rank))
            g = ad.matmul(z, ad.transpose(z, (0, 2, 1)))
            grams.append(ad.reshape(g, (b, 1, N_NODES, N_NODES)))
        return ad.relu(ad.concat(grams, axis=1))

    def __call__(self, a: Tensor, eta: np.ndarray | None = None,
                 sample: bool = True) -> dict:
        mu, logvar = self.encode(a)
        if sample:
            if eta is None:
                raise ValueError("sampling requires an explicit eta draw")
            v = ad.add(mu, ad.mul(ad.exp(ad.mul(0.5, logvar)), np.asarray(eta)))
        else:
            v = mu
        recon = self.decode(v)
        return {"mu": mu, "logvar": logvar, "v": v, "recon": recon}


def vae_forward(model: VaeModel, matrix: CellMatrix,
                rng: np.random.Generator | None = None,
                sample: bool = False) -> dict:
    was_training = model.training
    model.train(False)
    a = Tensor(stack_matrices([matrix]))
    with ad.no_grad():
        eta = rng.standard_normal((1, model.latent)) if sample and rng is not None else None
        out = model(a, eta=eta, sample=sample and eta is not None)
    model.train(was_training)
    return {k: v.data[0] if isinstance(v, Tensor) else v for k, v in out.items()}


def train_vae(corpus, config: AutoencoderTrainConfig) -> tuple[VaeModel, AutoencoderTrainResult]:
    """Fit the VAE with L2 reconstruction plus KL against the unit Gaussian."""
    arrays = corpus if isinstance(corpus, np.ndarray) else stack_matrices(corpus)
    if arrays.shape[0] < 1:
        raise ValueError("empty training corpus")
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    model = VaeModel(hidden=config.hidden, latent=config.latent,
                     decoder_rank=config.decoder_rank, rng=rng)
    train_idx, test_idx = _split(arrays.shape[0], config.test_fraction, rng)
    if len(train_idx) == 0:
        train_idx = test_idx
    train, test = arrays[train_idx], arrays[test_idx]
    test_eval = test if len(test) else train

    def eval_loss(xb: Tensor):
        out = model(xb, sample=False)
        return mse(out["recon"], xb.data)

    result = AutoencoderTrainResult()
    result.untrained_test_loss = _eval_recon_loss(model, test_eval,
                                                  config.batch_size, eval_loss)
    opt = Adam(model.parameters(), lr=config.lr_vae)
    steps_per_epoch = max(1, (len(train) + config.batch_size - 1) // config.batch_size)
    sched = OneCycle(max_lr=config.lr_vae, total_steps=config.epochs * steps_per_epoch)
    step = 0
    model.train(True)
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        total, count = 0.0, 0
        for start in range(0, len(train), config.batch_size):
            xb = train[order[start:start + config.batch_size]]
            eta = rng.standard_normal((len(xb), config.latent))
            out = model(Tensor(xb), eta=eta, sample=True)
            loss = ad.add(mse(out["recon"], xb),
                          kl_diag_gaussian(out["mu"], out["logvar"]))
            opt.zero_grad()
            ad.backward(loss)
            opt.step(lr=schedule_lr(sched, step))
            step += 1
            total += loss.item() * len(xb)
            count += len(xb)
        test_loss = _eval_recon_loss(model, test_eval, config.batch_size, eval_loss)
        result.history.append((epoch, total / max(1, count), test_loss))
    result.final_test_loss = result.history[-1][2]
    return model, result


# ---------------------------------------------------------------------------
# end-to-end convolutional predictor baseline


class ConvPredictor(Module):
    """conv+BN+GAP stem, then four feed-forward tanh layers halving in width."""

    def __init__(self, width: int = 2300, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.width = width
        self.conv = self.add_module("conv", Conv2d(N_CHANNELS, width, 3, rng))
        self.bn = self.add_module("bn", BatchNorm2d(width))
        self.gap = GlobalAvgPool2d()
        dims = [width]
        for _ in range(3):
            dims.append((dims[-1] + 1) // 2)
        dims.append(1)
        self.ff = [self.add_module(f"ff{i}", Linear(dims[i], dims[i + 1], rng))
                   for i in range(4)]

    def __call__(self, a: Tensor) -> Tensor:
        h = self.gap(ad.relu(self.bn(self.conv(a))))
        for layer in self.ff[:-1]:
            h = ad.tanh(layer(h))
        return ad.sigmoid(self.ff[-1](h))

    def predict(self, arrays: np.ndarray, batch_size: int = 256) -> np.ndarray:
        was_training = self.training
        self.train(False)
        outs = []
        with ad.no_grad():
            for start in range(0, arrays.shape[0], batch_size):
                outs.append(self(Tensor(arrays[start:start + batch_size])).data[:, 0])
        self.train(was_training)
        return np.concatenate(outs)


def conv_predictor_fit(model: ConvPredictor, arrays: np.ndarray,
                       labels: np.ndarray, epochs: int, lr: float = 1e-3,
                       batch_size: int = 16,
                       rng: np.random.Generator | None = None) -> ConvPredictor:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size and (labels.min() < 0.0 or labels.max() > 1.0):
        raise ValueError("labels must be normalized to [0,1]")
    rng = rng if rng is not None else np.random.default_rng(0)
    opt = Adam(model.parameters(), lr=lr)
    n = arrays.shape[0]
    model.train(True)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            out = model(Tensor(arrays[idx]))
            loss = mse(out, labels[idx][:, None])
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
    return model


# ---------------------------------------------------------------------------
# rank correlation


def _ranks(xs: np.ndarray) -> np.ndarray:
    order = np.argsort(xs, kind="stable")
    ranks = np.empty(len(xs), dtype=np.float64)
    ranks[order] = np.arange(1, len(xs) + 1)
    # average ranks over ties
    for v in np.unique(xs):
        mask = xs == v
        if mask.sum() > 1:
            ranks[mask] = ranks[mask].mean()
    return ranks


def spearman(xs, ys) -> float:
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ValueError(f"length mismatch: {xs.shape} vs {ys.shape}")
    if len(xs) < 2:
        raise ValueError("need at least two observations")
    rx, ry = _ranks(xs), _ranks(ys)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0.0:
        raise ValueError("constant input has no rank correlation")
    return float((rx * ry).sum() / denom)
