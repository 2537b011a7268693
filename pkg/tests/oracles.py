"""Independent oracles used by the test suite.

These deliberately avoid the library's analytic code paths: receptive fields
are measured from numeric impulse responses, expected improvement from Monte
Carlo, band content from FFTs.
"""

from __future__ import annotations

import numpy as np

from mstar.space import (N_NODES, OP_AVGPOOL, OP_CONV, OP_IDENTITY,
                         OP_MAXPOOL)

_support_memo: dict[tuple, int] = {}


def _sliding_max(x: np.ndarray, k: int) -> np.ndarray:
    xp = np.pad(x, (k - 1, k - 1))
    win = np.lib.stride_tricks.sliding_window_view(xp, k)
    return win.max(axis=-1)


def _apply_chain(seq: tuple) -> np.ndarray:
    x = np.ones(1)
    for op, k in seq:
        if op == OP_IDENTITY:
            continue
        if op == OP_CONV:
            x = np.convolve(x, np.ones(k))
        elif op == OP_AVGPOOL:
            x = np.convolve(x, np.ones(k) / k)
        elif op == OP_MAXPOOL:
            x = _sliding_max(x, k)
        else:
            raise ValueError(f"unknown op {op}")
    return x


def chain_support(seq: tuple) -> int:
    """Nonzero support of a unit impulse pushed through an op chain."""
    if seq not in _support_memo:
        _support_memo[seq] = int(np.count_nonzero(_apply_chain(seq) > 1e-12))
    return _support_memo[seq]


def _node_chains(graph) -> list[set[tuple]]:
    """All input->node op sequences (deduplicated exactly, not semantically)."""
    chains: list[set[tuple]] = [set() for _ in range(N_NODES)]
    chains[0].add(())
    incoming = {n: [] for n in range(N_NODES)}
    for e in graph.edges:
        incoming[e.dst].append(e)
    for j in range(1, N_NODES):
        for e in incoming[j]:
            for c in chains[e.src]:
                chains[j].add(c + ((e.op, e.kernel),))
        if len(chains[j]) > 200_000:
            raise RuntimeError("path explosion in impulse oracle")
    return chains


def impulse_rf_sets(graph, cells_stacked: int = 1):
    """Measured receptive-field sets per node (and for the cell output).

    Enumerates op chains along the DAG and measures each chain's impulse
    response numerically with all-ones weights. Stacked cells compose the
    previous cell's output chains with the next cell's chains.
    """
    feed: set[tuple] = {()}
    node_chains: list[set[tuple]] = []
    for _ in range(cells_stacked):
        local = _node_chains(graph)
        node_chains = [{pre + post for pre in feed for post in local_set}
                       if local_set else set()
                       for local_set in local]
        out = set(node_chains[N_NODES - 1])
        for o in graph.aggregation:
            out.update(node_chains[o])  # pointwise projection: no growth
        feed = out
    node_sets = tuple(frozenset(chain_support(c) for c in cs) for cs in node_chains)
    return node_sets, frozenset(chain_support(c) for c in feed)


def ei_monte_carlo(mean: float, std: float, best: float, xi: float,
                   n: int = 1_000_000, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    samples = rng.normal(mean, std, size=n)
    return float(np.maximum(samples - best - xi, 0.0).mean())


def band_energy_fraction(x: np.ndarray, freq: float, tol_bins: int = 1) -> float:
    """Share of spectral energy within tol_bins of freq (cycles/sample)."""
    spec = np.abs(np.fft.rfft(x)) ** 2
    target = int(round(freq * len(x)))
    lo, hi = max(0, target - tol_bins), min(len(spec) - 1, target + tol_bins)
    total = spec.sum()
    return float(spec[lo:hi + 1].sum() / total) if total > 0 else 0.0


def _nearest_centroid_accuracy(feats: np.ndarray, labels: np.ndarray) -> float:
    """Train/test split, per-class centroids, euclidean assignment."""
    n = len(labels)
    order = np.random.default_rng(123).permutation(n)
    cut = n // 2
    tr, te = order[:cut], order[cut:]
    mu = np.std(feats[tr], axis=0) + 1e-12
    f = feats / mu
    classes = np.unique(labels)
    cents = np.stack([f[tr][labels[tr] == c].mean(axis=0) for c in classes])
    d = ((f[te][:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    pred = classes[d.argmin(axis=1)]
    return float((pred == labels[te]).mean())


def spectrum_only_accuracy(X: np.ndarray, labels: np.ndarray, n_bands: int = 16) -> float:
    """Baseline that sees global band energies but no timing information."""
    x = X[:, 0, :]
    spec = np.abs(np.fft.rfft(x, axis=1)) ** 2
    bands = np.array_split(spec, n_bands, axis=1)
    feats = np.stack([b.sum(axis=1) for b in bands], axis=1)
    return _nearest_centroid_accuracy(np.log1p(feats), np.asarray(labels))


def time_aware_accuracy(X: np.ndarray, labels: np.ndarray, n_bands: int = 16,
                        n_windows: int = 4) -> float:
    """Baseline that sees band energies per time window."""
    x = X[:, 0, :]
    segs = np.array_split(x, n_windows, axis=1)
    feats = []
    for seg in segs:
        spec = np.abs(np.fft.rfft(seg, axis=1)) ** 2
        bands = np.array_split(spec, n_bands, axis=1)
        feats.extend(b.sum(axis=1) for b in bands)
    return _nearest_centroid_accuracy(np.log1p(np.stack(feats, axis=1)),
                                      np.asarray(labels))
