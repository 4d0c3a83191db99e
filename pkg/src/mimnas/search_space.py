"""Candidate operations, cell topologies, architecture parameters and genotypes.

A cell is a small DAG: nodes ``0 .. num_inputs-1`` are the cell inputs,
nodes ``num_inputs .. num_inputs+num_nodes-1`` are intermediate nodes.
Every edge ``(i, j)`` with ``i < j`` carries one mixed operation.  The
continuous relaxation keeps one real score per (edge, candidate op);
softmax over an edge row gives the operation mixture weights.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

GENOTYPE_SCHEMA_VERSION = 1

NONE_OP = "none"


class GenotypeError(ValueError):
    """Raised for malformed genotypes or architecture parameters."""


@dataclass(frozen=True)
class OperationKind:
    name: str
    is_parametric: bool
    is_skip: bool = False


OP_KINDS: dict[str, OperationKind] = {
    kind.name: kind
    for kind in [
        OperationKind(NONE_OP, is_parametric=False),
        OperationKind("max_pool_3x3", is_parametric=False),
        OperationKind("avg_pool_3x3", is_parametric=False),
        OperationKind("skip_connect", is_parametric=False, is_skip=True),
        OperationKind("sep_conv_3x3", is_parametric=True),
        OperationKind("sep_conv_5x5", is_parametric=True),
        OperationKind("dil_conv_3x3", is_parametric=True),
        OperationKind("dil_conv_5x5", is_parametric=True),
        OperationKind("conv_1x1", is_parametric=True),
        OperationKind("conv_3x3", is_parametric=True),
    ]
}

# Canonical op sets.  Order matters: ties at discretization resolve to the
# lowest index.
DARTS_OPS: tuple[str, ...] = (
    "none",
    "max_pool_3x3",
    "avg_pool_3x3",
    "skip_connect",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
)
NB201_OPS: tuple[str, ...] = (
    "none",
    "skip_connect",
    "conv_1x1",
    "conv_3x3",
    "avg_pool_3x3",
)


@dataclass(frozen=True)
class CellSpec:
    """Topology and candidate ops of one cell kind.

    ``node_arity`` is the number of incoming edges a derived genotype keeps
    per intermediate node (2 for DARTS-style cells).  ``None`` keeps every
    edge, NAS-Bench-201 style, where each edge gets exactly one op.
    """

    num_nodes: int
    num_inputs: int
    edges: tuple[tuple[int, int], ...]
    op_set: tuple[str, ...]
    cell_kind: str = "normal"
    node_arity: int | None = 2

    def __post_init__(self):
        if self.num_nodes < 1 or self.num_inputs < 1:
            raise ValueError("need at least one intermediate node and one input")
        if not self.op_set:
            raise ValueError("op_set must be non-empty")
        if len(set(self.op_set)) != len(self.op_set):
            raise ValueError("duplicate op names in op_set")
        for name in self.op_set:
            if name not in OP_KINDS:
                raise ValueError(f"unknown operation {name!r}")
        if self.cell_kind not in ("normal", "reduction"):
            raise ValueError(f"cell_kind must be 'normal' or 'reduction', got {self.cell_kind!r}")
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < j):
                raise ValueError(f"edge ({i}, {j}) violates from < to")
            if not (self.num_inputs <= j < self.num_inputs + self.num_nodes):
                raise ValueError(f"edge ({i}, {j}) targets a non-intermediate node")
            if (i, j) in seen:
                raise ValueError(f"duplicate edge ({i}, {j})")
            seen.add((i, j))
        min_in = self.node_arity if self.node_arity is not None else 1
        for node in self.intermediate_nodes():
            if len(self.incoming_edges(node)) < min_in:
                raise ValueError(f"node {node} has fewer than {min_in} incoming edges")

    def intermediate_nodes(self) -> range:
        return range(self.num_inputs, self.num_inputs + self.num_nodes)

    def incoming_edges(self, node: int) -> list[tuple[int, int]]:
        return [e for e in self.edges if e[1] == node]

    def edge_index(self, edge: tuple[int, int]) -> int:
        try:
            return self.edges.index(tuple(edge))
        except ValueError:
            raise GenotypeError(f"unknown edge {tuple(edge)} in {self.cell_kind} cell") from None

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def num_ops(self) -> int:
        return len(self.op_set)


def darts_cell(num_nodes: int = 4, op_set: Sequence[str] = DARTS_OPS,
               cell_kind: str = "normal") -> CellSpec:
    """Standard DARTS cell: 2 inputs, dense DAG, top-2 edges kept per node."""
    num_inputs = 2
    edges = tuple(
        (i, j)
        for j in range(num_inputs, num_inputs + num_nodes)
        for i in range(j)
    )
    return CellSpec(num_nodes=num_nodes, num_inputs=num_inputs, edges=edges,
                    op_set=tuple(op_set), cell_kind=cell_kind, node_arity=2)


def nb201_cell(num_nodes: int = 3, op_set: Sequence[str] = NB201_OPS) -> CellSpec:
    """NAS-Bench-201 style cell: 1 input, dense DAG, one op on every edge."""
    num_inputs = 1
    edges = tuple(
        (i, j)
        for j in range(num_inputs, num_inputs + num_nodes)
        for i in range(j)
    )
    return CellSpec(num_nodes=num_nodes, num_inputs=num_inputs, edges=edges,
                    op_set=tuple(op_set), cell_kind="normal", node_arity=None)


@dataclass
class ArchParams:
    """Continuous architecture parameters: one (num_edges, num_ops) float
    matrix per cell kind.  Softmax over a row yields the edge's op weights."""

    values: dict[str, np.ndarray]

    def __post_init__(self):
        for kind, mat in self.values.items():
            mat = np.asarray(mat, dtype=np.float64)
            if mat.ndim != 2:
                raise GenotypeError(f"alpha matrix for {kind!r} must be 2-D")
            if not np.all(np.isfinite(mat)):
                raise GenotypeError(f"non-finite alpha values for {kind!r}")
            self.values[kind] = mat

    def copy(self) -> "ArchParams":
        return ArchParams({k: v.copy() for k, v in self.values.items()})


def softmax_row(row: np.ndarray) -> np.ndarray:
    shifted = row - np.max(row)
    e = np.exp(shifted)
    return e / e.sum()


def edge_weights(arch: ArchParams, spec: CellSpec, edge: tuple[int, int] | int) -> np.ndarray:
    """Softmax op weights of one edge; positive, summing to 1."""
    if spec.cell_kind not in arch.values:
        raise GenotypeError(f"no alpha matrix for cell kind {spec.cell_kind!r}")
    idx = edge if isinstance(edge, (int, np.integer)) else spec.edge_index(edge)
    mat = arch.values[spec.cell_kind]
    if not (0 <= idx < mat.shape[0]):
        raise GenotypeError(f"unknown edge index {idx} in {spec.cell_kind} cell")
    return softmax_row(mat[idx])


@dataclass(frozen=True)
class Genotype:
    """Discrete architecture: per cell kind, per intermediate node, the chosen
    (op_name, predecessor_index) pairs."""

    cells: dict[str, tuple[tuple[tuple[str, int], ...], ...]]
    schema_version: int = GENOTYPE_SCHEMA_VERSION

    def to_json_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "cell_kinds": {
                kind: [[[op, pred] for op, pred in node] for node in nodes]
                for kind, nodes in self.cells.items()
            },
        }

    def to_json_bytes(self) -> bytes:
        return (json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n").encode()

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "Genotype":
        try:
            version = d["schema_version"]
            kinds = d["cell_kinds"]
        except (KeyError, TypeError) as exc:
            raise GenotypeError(f"malformed genotype document: missing {exc}") from None
        if version != GENOTYPE_SCHEMA_VERSION:
            raise GenotypeError(
                f"unsupported genotype schema_version {version}, "
                f"expected {GENOTYPE_SCHEMA_VERSION}")
        cells = {}
        for kind, nodes in kinds.items():
            cells[kind] = tuple(
                tuple((str(op), int(pred)) for op, pred in node) for node in nodes
            )
        return cls(cells=cells, schema_version=version)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_json_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Genotype":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise GenotypeError(f"genotype file {path} is not valid JSON: {exc}") from None
        return cls.from_json_dict(doc)


def _select_edges(spec: CellSpec, weights: np.ndarray, node: int) -> list[tuple[int, int]]:
    """Pick the edges kept at `node`, ranked by best non-none op weight."""
    candidates = spec.incoming_edges(node)
    none_idx = spec.op_set.index(NONE_OP) if NONE_OP in spec.op_set else None
    if spec.node_arity is None:
        return sorted(candidates)
    if len(candidates) < spec.node_arity:
        raise GenotypeError(
            f"node {node} has {len(candidates)} candidate edges, "
            f"needs {spec.node_arity}")

    def strength(edge):
        row = weights[spec.edge_index(edge)]
        best = max(w for k, w in enumerate(row) if k != none_idx)
        return best

    # Sort: strongest first; ties go to the lower predecessor index.
    ranked = sorted(candidates, key=lambda e: (-strength(e), e[0]))
    return sorted(ranked[: spec.node_arity])


def _argmax_op(spec: CellSpec, row: np.ndarray) -> str:
    none_idx = spec.op_set.index(NONE_OP) if NONE_OP in spec.op_set else None
    best_k, best_w = None, -np.inf
    for k, w in enumerate(row):
        if k == none_idx:
            continue
        if w > best_w:  # strict: ties keep the lowest op-set index
            best_k, best_w = k, w
    return spec.op_set[best_k]


def derive_genotype(arch: ArchParams, specs: Mapping[str, CellSpec] | CellSpec) -> Genotype:
    """Discretize architecture parameters into a genotype.

    Per intermediate node, keep the ``node_arity`` incoming edges with the
    largest non-none op weight and take the argmax non-none op on each.
    Deterministic: ties resolve to the lowest op-set index, then the lowest
    predecessor index.
    """
    if isinstance(specs, CellSpec):
        specs = {specs.cell_kind: specs}
    cells = {}
    for kind in sorted(specs):
        spec = specs[kind]
        if kind not in arch.values:
            raise GenotypeError(f"no alpha matrix for cell kind {kind!r}")
        mat = arch.values[kind]
        if mat.shape != (spec.num_edges, spec.num_ops):
            raise GenotypeError(
                f"alpha matrix for {kind!r} has shape {mat.shape}, "
                f"spec wants {(spec.num_edges, spec.num_ops)}")
        weights = np.stack([softmax_row(mat[e]) for e in range(spec.num_edges)])
        nodes = []
        for node in spec.intermediate_nodes():
            kept = _select_edges(spec, weights, node)
            pairs = tuple(
                (_argmax_op(spec, weights[spec.edge_index(e)]), e[0]) for e in kept
            )
            nodes.append(pairs)
        cells[kind] = tuple(nodes)
    return Genotype(cells=cells)


def validate_genotype(genotype: Genotype,
                      specs: Mapping[str, CellSpec] | CellSpec) -> list[str]:
    """Check all genotype invariants; returns every violation found."""
    if isinstance(specs, CellSpec):
        specs = {specs.cell_kind: specs}
    violations: list[str] = []
    if genotype.schema_version != GENOTYPE_SCHEMA_VERSION:
        violations.append(f"schema_version {genotype.schema_version} unsupported")
    for kind, nodes in genotype.cells.items():
        if not nodes:
            continue
        if kind not in specs:
            violations.append(f"cell kind {kind!r} has no spec")
            continue
        spec = specs[kind]
        if len(nodes) != spec.num_nodes:
            violations.append(
                f"{kind}: {len(nodes)} nodes in genotype, spec has {spec.num_nodes}")
        for pos, pairs in enumerate(nodes):
            node = spec.num_inputs + pos
            want = spec.node_arity if spec.node_arity is not None \
                else len(spec.incoming_edges(node))
            if len(pairs) != want:
                violations.append(f"{kind} node {node}: {len(pairs)} pairs, expected {want}")
            preds_seen = set()
            for op, pred in pairs:
                if op == NONE_OP:
                    violations.append(f"{kind} node {node}: op 'none' is forbidden")
                elif op not in spec.op_set:
                    violations.append(f"{kind} node {node}: op {op!r} not in op_set")
                if pred >= node:
                    violations.append(
                        f"{kind} node {node}: predecessor {pred} not before node")
                elif (pred, node) not in spec.edges:
                    violations.append(
                        f"{kind} node {node}: no edge from {pred} in spec")
                if pred in preds_seen:
                    violations.append(
                        f"{kind} node {node}: duplicate predecessor {pred}")
                preds_seen.add(pred)
    for kind, spec in specs.items():
        if kind not in genotype.cells or not genotype.cells[kind]:
            violations.append(f"cell kind {kind!r} missing from genotype")
    return violations


def space_size(spec: CellSpec) -> int:
    """Number of distinct genotypes expressible in a keep-all-edges space."""
    if spec.node_arity is not None:
        raise ValueError("space_size is defined for keep-all (node_arity=None) specs")
    ops = len([o for o in spec.op_set if o != NONE_OP])
    return ops ** spec.num_edges


def enumerate_genotypes(spec: CellSpec) -> Iterable[Genotype]:
    """All genotypes of a keep-all-edges space, in lexicographic edge-op order."""
    if spec.node_arity is not None:
        raise ValueError("enumeration is defined for keep-all (node_arity=None) specs")
    ops = [o for o in spec.op_set if o != NONE_OP]
    for combo in itertools.product(ops, repeat=spec.num_edges):
        nodes = []
        for node in spec.intermediate_nodes():
            pairs = tuple(
                (combo[spec.edge_index(e)], e[0])
                for e in sorted(spec.incoming_edges(node))
            )
            nodes.append(pairs)
        yield Genotype(cells={spec.cell_kind: tuple(nodes)})


def sample_genotypes(spec: CellSpec, n: int, seed: int) -> list[Genotype]:
    """Sample `n` distinct genotypes from a keep-all-edges space, seeded."""
    total = space_size(spec)
    if n > total:
        raise ValueError(f"cannot sample {n} distinct genotypes from a space of {total}")
    rng = np.random.default_rng(seed)
    picks = sorted(rng.choice(total, size=n, replace=False).tolist())
    ops = [o for o in spec.op_set if o != NONE_OP]
    out = []
    for index in picks:
        combo = []
        rem = index
        for _ in range(spec.num_edges):
            combo.append(ops[rem % len(ops)])
            rem //= len(ops)
        nodes = []
        for node in spec.intermediate_nodes():
            pairs = tuple(
                (combo[spec.edge_index(e)], e[0])
                for e in sorted(spec.incoming_edges(node))
            )
            nodes.append(pairs)
        out.append(Genotype(cells={spec.cell_kind: tuple(nodes)}))
    return out


def all_skip_genotype(specs: Mapping[str, CellSpec] | CellSpec) -> Genotype:
    """Degenerate genotype choosing skip_connect everywhere (collapse baseline)."""
    if isinstance(specs, CellSpec):
        specs = {specs.cell_kind: specs}
    cells = {}
    for kind in sorted(specs):
        spec = specs[kind]
        if "skip_connect" not in spec.op_set:
            raise ValueError(f"op_set of {kind!r} has no skip_connect")
        nodes = []
        for node in spec.intermediate_nodes():
            edges = sorted(spec.incoming_edges(node))
            if spec.node_arity is not None:
                edges = edges[: spec.node_arity]
            nodes.append(tuple(("skip_connect", e[0]) for e in edges))
        cells[kind] = tuple(nodes)
    return Genotype(cells=cells)
