"""Cell search space: encoding, validation, generation, mutation, serialization.

A cell is a 13-node DAG stored as a 4x13x13 integer tensor: one 13x13
adjacency matrix per operation (0 convolution, 1 max pool, 2 avg pool,
3 identity), where entry (i, j) holds the kernel size of the operation on
edge i -> j (identity stores 1, 0 means no edge). Nodes are partitioned
into index-contiguous layers {0}, {1}, {2..6}, {7..11}, {12}; edges only
run from lower to higher layers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

N_NODES = 13
N_CHANNELS = 4
OP_CONV, OP_MAXPOOL, OP_AVGPOOL, OP_IDENTITY = range(4)
OP_NAMES = ("conv", "max_pool", "avg_pool", "identity")

_LAYER_GROUPS = ((0,), (1,), (2, 3, 4, 5, 6), (7, 8, 9, 10, 11), (12,))
LAYER_OF = tuple(l for l, group in enumerate(_LAYER_GROUPS) for _ in group)

FORMAT_VERSION = "mstar-cell-1"

DEFAULT_CONV_KERNELS = (1, 3, 5, 9, 19, 39)
DEFAULT_POOL_KERNELS = (3, 5, 9)
DEFAULT_BOTTLENECK_NODES = (2, 3, 7, 8)


class ShapeError(ValueError):
    pass


class CellFormatError(ValueError):
    pass


class InvalidCellError(ValueError):
    def __init__(self, report: "ValidationReport"):
        super().__init__("invalid cell: " + "; ".join(v.message for v in report.violations))
        self.report = report


class CellMatrix:
    """Immutable 4x13x13 integer operation tensor."""

    __slots__ = ("ops",)

    def __init__(self, ops):
        arr = np.asarray(ops)
        if arr.shape != (N_CHANNELS, N_NODES, N_NODES):
            raise ShapeError(
                f"cell tensor must be {N_CHANNELS}x{N_NODES}x{N_NODES}, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(np.equal(np.mod(arr, 1), 0)):
                raise ShapeError("cell tensor entries must be integers")
        arr = arr.astype(np.int64).copy()
        arr.setflags(write=False)
        self.ops = arr

    def writable_copy(self) -> np.ndarray:
        return self.ops.copy()

    def __eq__(self, other):
        return isinstance(other, CellMatrix) and np.array_equal(self.ops, other.ops)

    def __hash__(self):
        return hash(self.ops.tobytes())

    def __repr__(self):
        return f"CellMatrix(edges={int(np.count_nonzero(self.ops))})"


def _default_widths(default_width: int, bottleneck_width: int) -> tuple[int, ...]:
    return tuple(bottleneck_width if i in DEFAULT_BOTTLENECK_NODES else default_width
                 for i in range(N_NODES))


@dataclass(frozen=True)
class SpaceConfig:
    """Knobs of the cell space; widths are per-node starting channel counts."""

    default_width: int = 128
    bottleneck_width: int = 32
    node_widths: tuple[int, ...] | None = None
    edge_probability: float = 0.35
    conv_kernels: tuple[int, ...] = DEFAULT_CONV_KERNELS
    pool_kernels: tuple[int, ...] = DEFAULT_POOL_KERNELS
    identity_anywhere: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.default_width <= 0 or self.bottleneck_width <= 0:
            raise ValueError("widths must be positive")
        if not (0.0 <= self.edge_probability <= 1.0):
            raise ValueError("edge probability must lie in [0,1]")
        if not self.conv_kernels or not self.pool_kernels:
            raise ValueError("kernel sets must be non-empty")
        if self.node_widths is None:
            object.__setattr__(self, "node_widths",
                               _default_widths(self.default_width, self.bottleneck_width))
        if len(self.node_widths) != N_NODES or any(w <= 0 for w in self.node_widths):
            raise ValueError(f"node_widths needs {N_NODES} positive entries")

    def scaled(self, default_width: int, bottleneck_width: int) -> "SpaceConfig":
        return replace(self, default_width=default_width, bottleneck_width=bottleneck_width,
                       node_widths=_default_widths(default_width, bottleneck_width))


@dataclass(frozen=True)
class Violation:
    rule: str
    location: tuple
    message: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def valid(self) -> bool:
        return not self.violations


@dataclass(frozen=True)
class CellNode:
    index: int
    layer: int
    width: int
    reachable: bool
    orphan: bool


@dataclass(frozen=True)
class CellEdge:
    src: int
    dst: int
    op: int
    kernel: int


@dataclass(frozen=True)
class CellGraph:
    """Validated, channel-resolved view of a cell."""

    nodes: tuple[CellNode, ...]
    edges: tuple[CellEdge, ...]
    aggregation: tuple[int, ...]  # orphan node indices, ascending
    output_width: int


def legal_slots() -> list[tuple[int, int]]:
    """All (i, j) pairs that may carry an edge: i < j, different layers."""
    return [(i, j) for i in range(N_NODES) for j in range(i + 1, N_NODES)
            if LAYER_OF[i] != LAYER_OF[j]]


_LEGAL_SLOTS = tuple(legal_slots())
NUM_LEGAL_SLOTS = len(_LEGAL_SLOTS)


def slot_options(i: int, j: int, config: SpaceConfig) -> list[tuple[int, int]]:
    """(channel, value) choices for slot (i, j); (-1, 0) encodes "no edge"."""
    opts: list[tuple[int, int]] = [(-1, 0)]
    opts += [(OP_CONV, k) for k in config.conv_kernels]
    opts += [(OP_MAXPOOL, k) for k in config.pool_kernels]
    opts += [(OP_AVGPOOL, k) for k in config.pool_kernels]
    if config.identity_anywhere or j == N_NODES - 1:
        opts.append((OP_IDENTITY, 1))
    return opts


def _edge_map(ops: np.ndarray) -> dict[tuple[int, int], tuple[int, int]]:
    """Map (i, j) -> (channel, value) for every nonzero slot (first channel wins)."""
    out: dict[tuple[int, int], tuple[int, int]] = {}
    chans, rows, cols = np.nonzero(ops)
    for c, i, j in zip(chans.tolist(), rows.tolist(), cols.tolist()):
        if (i, j) not in out:
            out[(i, j)] = (c, int(ops[c, i, j]))
    return out


def validate(matrix: CellMatrix, config: SpaceConfig) -> ValidationReport:
    """Report every violated space rule; never raises for rule violations."""
    ops = matrix.ops
    violations: list[Violation] = []

    for c in range(N_CHANNELS):
        rows, cols = np.nonzero(ops[c])
        for i, j in zip(rows.tolist(), cols.tolist()):
            if j <= i:
                violations.append(Violation(
                    "upper-triangular", (c, i, j),
                    f"entry at ({c},{i},{j}) must be zero (j <= i)"))
                continue
            if LAYER_OF[i] == LAYER_OF[j]:
                violations.append(Violation(
                    "same-layer-edge", (c, i, j),
                    f"same-layer edge {i}->{j} in layer {LAYER_OF[i]}"))
            value = int(ops[c, i, j])
            legal = {OP_CONV: config.conv_kernels,
                     OP_MAXPOOL: config.pool_kernels,
                     OP_AVGPOOL: config.pool_kernels,
                     OP_IDENTITY: (1,)}[c]
            if value not in legal:
                violations.append(Violation(
                    "illegal-kernel", (c, i, j),
                    f"illegal kernel {value} at ({c},{i},{j}) for {OP_NAMES[c]}"))
            if c == OP_IDENTITY and not config.identity_anywhere and j != N_NODES - 1:
                violations.append(Violation(
                    "identity-placement", (c, i, j),
                    f"identity edge {i}->{j} only allowed into the output node"))

    occupied = np.count_nonzero(ops, axis=0)
    for i, j in zip(*np.nonzero(occupied > 1)):
        violations.append(Violation(
            "multi-op-edge", (int(i), int(j)),
            f"multiple operations on edge {int(i)}->{int(j)}"))

    # Output reachability: input must feed node 12 through edges or through an
    # orphan picked up by the aggregation path. Traverse the upper triangle only
    # so broken matrices still get a meaningful answer.
    adj = [[] for _ in range(N_NODES)]
    for (i, j) in _edge_map(ops):
        if i < j:
            adj[i].append(j)
    reachable = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        for j in adj[i]:
            if j not in reachable:
                reachable.add(j)
                stack.append(j)
    feeds_output = any(
        n == N_NODES - 1 or not adj[n] for n in reachable if n != 0)
    if not feeds_output:
        violations.append(Violation(
            "output-unreachable", (N_NODES - 1,),
            "output unreachable: no path from input to node 12 or to an orphan"))

    return ValidationReport(tuple(violations))


def preprocess(matrix: CellMatrix, config: SpaceConfig) -> CellGraph:
    """Resolve channels and the orphan aggregation plan for a valid cell.

    A connected node's width is the minimum of its own starting width and
    the resolved widths of its connected predecessors; the raw input node is
    width-neutral (edges leaving it project the input data instead). Orphans
    are reachable non-output nodes with no outgoing edge; they are gathered
    once, in index order, into the aggregation plan.
    """
    report = validate(matrix, config)
    if not report.valid:
        raise InvalidCellError(report)

    edges = tuple(CellEdge(i, j, c, v)
                  for (i, j), (c, v) in sorted(_edge_map(matrix.ops).items()))
    preds: dict[int, list[int]] = {n: [] for n in range(N_NODES)}
    out_deg = [0] * N_NODES
    for e in edges:
        preds[e.dst].append(e.src)
        out_deg[e.src] += 1

    reachable = [False] * N_NODES
    reachable[0] = True
    for j in range(1, N_NODES):
        reachable[j] = any(reachable[i] for i in preds[j])

    widths = [0] * N_NODES
    widths[0] = config.node_widths[0]
    for j in range(1, N_NODES):
        internal = [widths[i] for i in preds[j] if i != 0 and reachable[i]]
        widths[j] = min([config.node_widths[j]] + internal) if reachable[j] \
            else config.node_widths[j]

    orphans = tuple(n for n in range(1, N_NODES - 1) if reachable[n] and out_deg[n] == 0)
    out_width = widths[N_NODES - 1]
    nodes = tuple(CellNode(n, LAYER_OF[n], widths[n], reachable[n], n in orphans)
                  for n in range(N_NODES))
    return CellGraph(nodes=nodes, edges=edges, aggregation=orphans,
                     output_width=out_width)


def reencode(graph: CellGraph) -> CellMatrix:
    ops = np.zeros((N_CHANNELS, N_NODES, N_NODES), dtype=np.int64)
    for e in graph.edges:
        ops[e.op, e.src, e.dst] = e.kernel
    return CellMatrix(ops)


def _repair(ops: np.ndarray, rng: np.random.Generator, config: SpaceConfig) -> None:
    """Add one identity shortcut from the input if the output is unreachable."""
    if np.count_nonzero(ops[:, 0, :]) > 0:
        return
    j = int(rng.integers(1, N_NODES)) if config.identity_anywhere else N_NODES - 1
    ops[OP_IDENTITY, 0, j] = 1


def _sample_slot(config: SpaceConfig, rng: np.random.Generator,
                 i: int, j: int) -> tuple[int, int]:
    """Slot value under the generation distribution; (-1, 0) when empty."""
    if rng.random() >= config.edge_probability:
        return (-1, 0)
    choices = [(OP_CONV, tuple(config.conv_kernels)),
               (OP_MAXPOOL, tuple(config.pool_kernels)),
               (OP_AVGPOOL, tuple(config.pool_kernels))]
    if config.identity_anywhere or j == N_NODES - 1:
        choices.append((OP_IDENTITY, (1,)))
    c, kernels = choices[int(rng.integers(len(choices)))]
    return c, int(kernels[int(rng.integers(len(kernels)))])


def random_cell(config: SpaceConfig, rng: np.random.Generator) -> CellMatrix:
    """Sample a valid cell: per-slot Bernoulli edges, uniform op and kernel."""
    ops = np.zeros((N_CHANNELS, N_NODES, N_NODES), dtype=np.int64)
    for (i, j) in _LEGAL_SLOTS:
        c, v = _sample_slot(config, rng, i, j)
        if c >= 0:
            ops[c, i, j] = v
    _repair(ops, rng, config)
    return CellMatrix(ops)


def mutate(matrix: CellMatrix, fraction: float, rng: np.random.Generator,
           config: SpaceConfig | None = None) -> CellMatrix:
    """Resample ceil(fraction * E) distinct slots to a different value.

    E counts legal (i, j) slots. Each selected slot is redrawn uniformly from
    its other options (including "no edge"), so the pre-repair changed-slot
    count is exactly the selection size. A repair pass restores output
    reachability when needed.
    """
    if not (0.0 <= fraction <= 1.0):
        raise ValueError(f"fraction must lie in [0,1], got {fraction}")
    config = config or SpaceConfig()
    if fraction == 0.0:
        return matrix
    ops = matrix.writable_copy()
    n_pick = math.ceil(fraction * NUM_LEGAL_SLOTS)
    picked = rng.choice(NUM_LEGAL_SLOTS, size=n_pick, replace=False)
    for s in picked:
        i, j = _LEGAL_SLOTS[int(s)]
        current = next(((c, int(ops[c, i, j])) for c in range(N_CHANNELS)
                        if ops[c, i, j] != 0), (-1, 0))
        options = [o for o in slot_options(i, j, config) if o != current]
        c, v = options[int(rng.integers(len(options)))]
        ops[:, i, j] = 0
        if c >= 0:
            ops[c, i, j] = v
    _repair(ops, rng, config)
    return CellMatrix(ops)


# ---------------------------------------------------------------------------
# serialization


def canonical_serialize(matrix: CellMatrix, meta: dict | None = None) -> str:
    doc = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "ops": matrix.ops.tolist(),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"


def parse(text: str) -> CellMatrix:
    matrix, _ = parse_document(text)
    return matrix


def parse_document(text: str) -> tuple[CellMatrix, dict]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise CellFormatError(f"not valid JSON: {e}") from None
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise CellFormatError(
            f"expected format_version '{FORMAT_VERSION}', got "
            f"{doc.get('format_version') if isinstance(doc, dict) else type(doc).__name__!r}")
    ops = doc.get("ops")
    if (not isinstance(ops, list) or len(ops) != N_CHANNELS
            or any(not isinstance(ch, list) or len(ch) != N_NODES for ch in ops)
            or any(not isinstance(row, list) or len(row) != N_NODES
                   for ch in ops for row in ch)):
        raise CellFormatError(f"ops must be nested {N_CHANNELS}x{N_NODES}x{N_NODES} lists")
    legal_values = {OP_CONV: set(DEFAULT_CONV_KERNELS) | {0},
                    OP_MAXPOOL: set(DEFAULT_POOL_KERNELS) | {0},
                    OP_AVGPOOL: set(DEFAULT_POOL_KERNELS) | {0},
                    OP_IDENTITY: {0, 1}}
    for c in range(N_CHANNELS):
        for i in range(N_NODES):
            for j in range(N_NODES):
                v = ops[c][i][j]
                if isinstance(v, bool) or not isinstance(v, int):
                    raise CellFormatError(f"non-integer entry {v!r} at ({c},{i},{j})")
                if v not in legal_values[c]:
                    raise CellFormatError(f"illegal kernel {v} at ({c},{i},{j})")
    meta = doc.get("meta") or {}
    if not isinstance(meta, dict):
        raise CellFormatError("meta must be a JSON object")
    return CellMatrix(np.array(ops, dtype=np.int64)), meta
