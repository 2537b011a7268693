"""Receptive-field analysis of cells.

Stride-1 chains compose additively: a path through ops with kernels
k_1..k_m spans r = 1 + sum(k_t - 1) input samples; identity edges add
nothing. Each node's receptive-field set collects r over all input->node
paths. Stacking cells feeds the previous cell's output set (node 12 plus
aggregated orphans) into the next cell's input node.
"""

from __future__ import annotations

from dataclasses import dataclass

from .space import N_NODES, OP_IDENTITY, CellGraph


@dataclass(frozen=True)
class ReceptiveFieldReport:
    node_sets: tuple[frozenset[int], ...]  # per node of the deepest cell
    output_set: frozenset[int]             # what the next cell (or head) sees
    cells_stacked: int


def _edge_growth(op: int, kernel: int) -> int:
    return 0 if op == OP_IDENTITY else kernel - 1


def _one_cell(graph: CellGraph, input_set: frozenset[int]) -> tuple[tuple[frozenset[int], ...], frozenset[int]]:
    sets: list[frozenset[int]] = [frozenset()] * N_NODES
    sets[0] = input_set
    incoming: dict[int, list] = {n: [] for n in range(N_NODES)}
    for e in graph.edges:
        incoming[e.dst].append(e)
    for j in range(1, N_NODES):
        acc: set[int] = set()
        for e in incoming[j]:
            growth = _edge_growth(e.op, e.kernel)
            acc.update(r + growth for r in sets[e.src])
        sets[j] = frozenset(acc)
    # orphan aggregation uses a pointwise projection, so it adds no growth
    out = set(sets[N_NODES - 1])
    for o in graph.aggregation:
        out.update(sets[o])
    return tuple(sets), frozenset(out)


def receptive_fields(graph: CellGraph, cells_stacked: int = 1) -> ReceptiveFieldReport:
    """Per-node receptive-field sets of the deepest of ``cells_stacked`` cells."""
    if cells_stacked < 1:
        raise ValueError("cells_stacked must be >= 1")
    feed = frozenset({1})
    node_sets: tuple[frozenset[int], ...] = ()
    for _ in range(cells_stacked):
        node_sets, feed = _one_cell(graph, feed)
    return ReceptiveFieldReport(node_sets=node_sets, output_set=feed,
                                cells_stacked=cells_stacked)
