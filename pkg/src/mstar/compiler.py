"""Compile cells into trainable networks; fixed multi-kernel reference models.

A compiled network stacks identical cells. Within a cell, node j's output is
the elementwise sum of its incoming edge operations, each projecting to the
node's resolved width; convolution edges run conv -> batch norm -> ReLU,
pooling/identity edges add a pointwise projection only when widths differ.
Orphan nodes are concatenated, projected pointwise to the output width and
added to node 12's output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import (AvgPool1d, BatchNorm1d, Conv1d, Linear, MaxPool1d, Module)
from .space import (N_NODES, OP_AVGPOOL, OP_CONV, OP_IDENTITY, OP_MAXPOOL,
                    CellGraph)

HEAD_KINDS = ("gap_gmp_linear", "linear_flatten", "none")


class CompileError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    cells_stacked: int = 1
    input_channels: int = 1
    head: str = "gap_gmp_linear"
    output_width: int = 2
    input_length: int | None = None  # needed by the flatten head

    def __post_init__(self):
        if self.cells_stacked < 1:
            raise ValueError("cells_stacked must be >= 1")
        if self.head not in HEAD_KINDS:
            raise ValueError(f"head must be one of {HEAD_KINDS}")
        if self.head != "none" and self.output_width < 1:
            raise ValueError("output_width must be >= 1 for a classifier head")


class _EdgeOp(Module):
    def __init__(self, op: int, kernel: int, in_width: int, out_width: int,
                 rng: np.random.Generator):
        super().__init__()
        self.op = op
        self.kernel = kernel
        if op == OP_CONV:
            self.conv = self.add_module("conv", Conv1d(in_width, out_width, kernel, rng))
            self.bn = self.add_module("bn", BatchNorm1d(out_width))
            self.pool = None
            self.proj = None
        else:
            self.conv = None
            self.bn = None
            self.pool = (MaxPool1d(kernel) if op == OP_MAXPOOL
                         else AvgPool1d(kernel) if op == OP_AVGPOOL else None)
            self.proj = None
            if in_width != out_width:
                self.proj = self.add_module("proj", Conv1d(in_width, out_width, 1, rng))

    def __call__(self, x: Tensor) -> Tensor:
        if self.conv is not None:
            return ad.relu(self.bn(self.conv(x)))
        if self.pool is not None:
            x = self.pool(x)
        if self.proj is not None:
            x = self.proj(x)
        return x


class _Cell(Module):
    def __init__(self, graph: CellGraph, input_width: int, rng: np.random.Generator):
        super().__init__()
        self.graph = graph
        self.input_width = input_width
        widths = [n.width for n in graph.nodes]
        reachable = [n.reachable for n in graph.nodes]
        self.live_edges = [e for e in graph.edges if reachable[e.src]]
        self.edge_ops: dict[tuple[int, int], _EdgeOp] = {}
        for e in self.live_edges:
            in_w = input_width if e.src == 0 else widths[e.src]
            mod = _EdgeOp(e.op, e.kernel, in_w, widths[e.dst], rng)
            self.edge_ops[(e.src, e.dst)] = mod
            self.add_module(f"e{e.src}-{e.dst}", mod)
        self.aggregate = None
        if graph.aggregation:
            total = sum(widths[o] for o in graph.aggregation)
            self.aggregate = self.add_module(
                "aggregate", Conv1d(total, graph.output_width, 1, rng))

    def node_outputs(self, x: Tensor) -> list[Tensor | None]:
        """Outputs of nodes 0..11; the output node is evaluated by ``combine``."""
        outs: list[Tensor | None] = [None] * N_NODES
        outs[0] = x
        for j in range(1, N_NODES - 1):
            contribs = [self.edge_ops[(e.src, e.dst)](outs[e.src])
                        for e in self.live_edges if e.dst == j and outs[e.src] is not None]
            if contribs:
                acc = contribs[0]
                for c in contribs[1:]:
                    acc = ad.add(acc, c)
                outs[j] = acc
        return outs

    def combine(self, outs: list[Tensor | None]) -> Tensor:
        """Evaluate node 12 from the given node outputs and add the orphan path."""
        contribs = [self.edge_ops[(e.src, e.dst)](outs[e.src])
                    for e in self.live_edges
                    if e.dst == N_NODES - 1 and outs[e.src] is not None]
        result = None
        for c in contribs:
            result = c if result is None else ad.add(result, c)
        if self.aggregate is not None:
            gathered = ad.concat([outs[o] for o in self.graph.aggregation], axis=1)
            agg = self.aggregate(gathered)
            result = agg if result is None else ad.add(result, agg)
        if result is None:
            raise CompileError("cell produced no output (unreachable node 12, no orphans)")
        return result

    def __call__(self, x: Tensor) -> Tensor:
        return self.combine(self.node_outputs(x))


class _GapGmpHead(Module):
    def __init__(self, in_width: int, out_width: int, rng: np.random.Generator):
        super().__init__()
        self.linear = self.add_module("linear", Linear(2 * in_width, out_width, rng))

    def __call__(self, x: Tensor) -> Tensor:
        feats = ad.concat([ad.tmean(x, axis=2), ad.tmax(x, axis=2)], axis=1)
        return self.linear(feats)


class _FlattenHead(Module):
    def __init__(self, in_width: int, length: int, out_width: int,
                 rng: np.random.Generator):
        super().__init__()
        self.in_features = in_width * length
        self.linear = self.add_module("linear", Linear(self.in_features, out_width, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.linear(ad.reshape(x, (x.data.shape[0], self.in_features)))


class Network(Module):
    """Stack of identical cells plus an optional classifier head."""

    def __init__(self, graph: CellGraph, spec: NetworkSpec, seed: int = 0):
        super().__init__()
        self.graph = graph
        self.spec = spec
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        self.cells: list[_Cell] = []
        in_w = spec.input_channels
        for t in range(spec.cells_stacked):
            cell = _Cell(graph, in_w, rng)
            self.cells.append(cell)
            self.add_module(f"cell{t}", cell)
            in_w = graph.output_width
        self.feature_width = graph.output_width
        if spec.head == "gap_gmp_linear":
            self.head = self.add_module(
                "head", _GapGmpHead(self.feature_width, spec.output_width, rng))
        elif spec.head == "linear_flatten":
            if spec.input_length is None:
                raise CompileError("linear_flatten head requires input_length")
            self.head = self.add_module(
                "head", _FlattenHead(self.feature_width, spec.input_length,
                                     spec.output_width, rng))
        else:
            self.head = None

    def features(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 3 or x.data.shape[1] != self.spec.input_channels:
            raise CompileError(
                f"input must be (B,{self.spec.input_channels},L), got {x.data.shape}")
        for cell in self.cells:
            x = cell(x)
        return x

    def __call__(self, x) -> Tensor:
        feats = self.features(x)
        return self.head(feats) if self.head is not None else feats

    def first_cell_node_output(self, x, node: int) -> Tensor:
        """Output tensor of one node of the first cell (0..11)."""
        if not 0 <= node < N_NODES - 1:
            raise CompileError(f"node {node} is not attributable (output node)")
        outs = self.cells[0].node_outputs(x if isinstance(x, Tensor) else Tensor(x))
        h = outs[node]
        if h is None:
            raise CompileError(f"node {node} has no output (unreachable)")
        return h

    def forward_from_masked_node(self, keep_node: int, h: Tensor, x) -> Tensor:
        """Downstream logits as a function of node ``keep_node``'s output ``h``.

        Every other first-cell node output is replaced with zeros, so only
        the kept node's direct edges into node 12 (or its aggregation slot,
        if it is an orphan) carry influence; this is the attribution target
        for intermediate-node scoring.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        outs = self.cells[0].node_outputs(x)
        masked: list[Tensor | None] = []
        for idx, o in enumerate(outs):
            if idx == keep_node:
                masked.append(h)
            elif o is None:
                masked.append(None)
            else:
                masked.append(Tensor(np.zeros_like(o.data)))
        feats = self.cells[0].combine(masked)
        for cell in self.cells[1:]:
            feats = cell(feats)
        return self.head(feats) if self.head is not None else feats

    def forward_with_first_cell_mask(self, x, keep_node: int) -> Tensor:
        h = self.first_cell_node_output(x, keep_node)
        return self.forward_from_masked_node(keep_node, h, x)


def compile_network(graph: CellGraph, spec: NetworkSpec, seed: int = 0) -> Network:
    return Network(graph, spec, seed)


def count_parameters(net: Module) -> int:
    return int(sum(p.data.size for p in net.parameters().values()))


# ---------------------------------------------------------------------------
# fixed multi-kernel reference models


MOTIVATION_KINDS = ("M_all", "M_20", "M_30", "M_40", "M_50", "M_60")
M_ALL_KERNELS = (3, 5, 7, 9, 11, 13, 15, 17, 20)
_N_LAYERS = 5


def _kernels_for(kind: str) -> tuple[int, ...]:
    if kind == "M_all":
        return M_ALL_KERNELS
    if kind in MOTIVATION_KINDS:
        return (int(kind.split("_")[1]),)
    raise ValueError(f"unknown kind {kind!r}; expected one of {MOTIVATION_KINDS}")


def _reference_param_count(kernels: tuple[int, ...], width: int,
                           in_channels: int, classes: int) -> int:
    total = 0
    cin = in_channels
    for _ in range(_N_LAYERS):
        total += sum(cin * width * k + width for k in kernels)  # convs + biases
        total += 2 * width  # batch-norm affine
        cin = width
    total += 2 * width * classes + classes  # gap+gmp linear head
    return total


def _calibrated_width(kind: str, base_width: int, in_channels: int,
                      classes: int) -> int:
    """Width that matches M_all's parameter count at ``base_width``."""
    if kind == "M_all":
        return base_width
    target = _reference_param_count(M_ALL_KERNELS, base_width, in_channels, classes)
    kernels = _kernels_for(kind)
    guess = max(1, round(base_width * math.sqrt(sum(M_ALL_KERNELS) / sum(kernels))))
    lo, hi = max(1, guess - 64), guess + 64
    best, best_err = guess, float("inf")
    for w in range(lo, hi + 1):
        err = abs(_reference_param_count(kernels, w, in_channels, classes) - target)
        if err < best_err:
            best, best_err = w, err
    return best


class _MultiKernelLayer(Module):
    def __init__(self, in_channels: int, width: int, kernels: tuple[int, ...],
                 rng: np.random.Generator):
        super().__init__()
        self.branches = [self.add_module(f"k{k}", Conv1d(in_channels, width, k, rng))
                         for k in kernels]
        self.bn = self.add_module("bn", BatchNorm1d(width))

    def __call__(self, x: Tensor) -> Tensor:
        acc = self.branches[0](x)
        for br in self.branches[1:]:
            acc = ad.add(acc, br(x))
        return ad.relu(self.bn(acc))


class MotivationNet(Module):
    """Five conv layers (single- or multi-kernel) with a gap+gmp linear head."""

    def __init__(self, kind: str, in_channels: int, classes: int, width: int,
                 rng: np.random.Generator):
        super().__init__()
        self.kind = kind
        self.kernels = _kernels_for(kind)
        self.width = width
        cin = in_channels
        self.stack: list[_MultiKernelLayer] = []
        for t in range(_N_LAYERS):
            layer = _MultiKernelLayer(cin, width, self.kernels, rng)
            self.stack.append(layer)
            self.add_module(f"layer{t}", layer)
            cin = width
        self.head = self.add_module("head", _GapGmpHead(width, classes, rng))

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.stack:
            x = layer(x)
        return self.head(x)


def build_motivation_model(kind: str, in_channels: int = 12, classes: int = 5,
                           base_width: int = 128, seed: int = 0) -> MotivationNet:
    """Reference model for the kernel-scale comparison.

    ``base_width`` is the multi-kernel model's channel count; single-kernel
    kinds get their width calibrated so parameter counts stay within a few
    percent of each other (a fixed 128 everywhere would spread counts by 5x).
    """
    width = _calibrated_width(kind, base_width, in_channels, classes)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return MotivationNet(kind, in_channels, classes, width, rng)
