"""Operator graph with per-operator precision assignment for one device."""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from enum import Enum
from types import MappingProxyType
from typing import Iterable, Mapping

from .errors import GraphCycleError, ValidationError


_BITS = {"INT8": 8, "FP16": 16, "FP32": 32}


class Precision(Enum):
    INT8 = "INT8"
    FP16 = "FP16"
    FP32 = "FP32"

    @property
    def bit_width(self) -> int:
        return _BITS[self.value]

    @property
    def numeric_class(self) -> str:
        return "fixed_point" if self is Precision.INT8 else "floating_point"

    @property
    def is_fixed_point(self) -> bool:
        return self is Precision.INT8

    def next_higher(self) -> "Precision | None":
        """The next wider precision, or None above FP32."""
        return _NEXT.get(self)

    def __lt__(self, other):
        if not isinstance(other, Precision):
            return NotImplemented
        return self.bit_width < other.bit_width

    def __le__(self, other):
        if not isinstance(other, Precision):
            return NotImplemented
        return self.bit_width <= other.bit_width

    def __gt__(self, other):
        if not isinstance(other, Precision):
            return NotImplemented
        return self.bit_width > other.bit_width

    def __ge__(self, other):
        if not isinstance(other, Precision):
            return NotImplemented
        return self.bit_width >= other.bit_width


_NEXT = {Precision.INT8: Precision.FP16, Precision.FP16: Precision.FP32}


def output_precision(kernel: Precision) -> Precision:
    """Precision of the tensor an operator emits when its kernel runs at ``kernel``.

    Fixed-point kernels dequantize into FP32 outputs.
    """
    if kernel is Precision.INT8:
        return Precision.FP32
    return kernel


def backward_precision(kernel: Precision) -> Precision:
    # integer backward kernels are slow, so fixed-point operators run backward in FP16
    if kernel is Precision.INT8:
        return Precision.FP16
    return kernel


class OperatorKind(Enum):
    ADJUSTABLE = "adjustable"
    DEPENDENT = "dependent"
    FIXED = "fixed"


@dataclass(frozen=True)
class OperatorNode:
    id: str
    kind: OperatorKind
    output_numel: int
    has_weight: bool = False
    weight_numel: int = 0
    subgraph_id: str = "0"
    supported_precisions: tuple[Precision, ...] = (Precision.FP32,)
    depth: int = 1

    def __post_init__(self):
        if not self.supported_precisions:
            raise ValidationError(f"{self.id}: supported_precisions is empty")
        if Precision.FP32 not in self.supported_precisions:
            raise ValidationError(f"{self.id}: FP32 must always be supported")
        if self.has_weight and self.weight_numel <= 0:
            raise ValidationError(f"{self.id}: has_weight requires weight_numel > 0")
        if self.output_numel < 0 or self.weight_numel < 0:
            raise ValidationError(f"{self.id}: element counts must be nonnegative")

    @property
    def lowest_precision(self) -> Precision:
        return min(self.supported_precisions)

    def higher_supported(self, p: Precision) -> Precision | None:
        nxt = p.next_higher()
        if nxt is not None and nxt in self.supported_precisions:
            return nxt
        return None


@dataclass(frozen=True, eq=False)
class PrecisionDAG:
    """Immutable operator graph plus one device's precision assignment.

    Build through :func:`build_dag`; ``order`` is a deterministic topological
    order (ties resolved by node declaration order).
    """

    nodes: Mapping[str, OperatorNode]
    edges: tuple[tuple[str, str], ...]
    assignment: Mapping[str, Precision]
    order: tuple[str, ...]
    preds: Mapping[str, tuple[str, ...]]
    succs: Mapping[str, tuple[str, ...]]
    model_depth: int
    _index: Mapping[str, int] = field(repr=False)

    def __eq__(self, other):
        if not isinstance(other, PrecisionDAG):
            return NotImplemented
        return (
            dict(self.nodes) == dict(other.nodes)
            and self.edges == other.edges
            and dict(self.assignment) == dict(other.assignment)
        )

    def __hash__(self):
        return hash((self.edges, tuple(sorted((k, v.value) for k, v in self.assignment.items()))))

    def topo_index(self, op: str) -> int:
        return self._index[op]

    def output_of(self, op: str) -> Precision:
        return output_precision(self.assignment[op])

    def with_assignment(self, changes: Mapping[str, Precision]) -> "PrecisionDAG":
        """Copy of this DAG with some assignments replaced (structure shared)."""
        merged = dict(self.assignment)
        merged.update(changes)
        _check_assignment(self.nodes, merged)
        return replace(self, assignment=MappingProxyType(merged))

    def adjustable(self) -> list[str]:
        return [n for n in self.order if self.nodes[n].kind is OperatorKind.ADJUSTABLE]

    def subgraphs(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for n in self.order:
            groups.setdefault(self.nodes[n].subgraph_id, []).append(n)
        return groups


def _check_assignment(nodes, assignment):
    missing = [n for n in nodes if n not in assignment]
    if missing:
        raise ValidationError(f"assignment does not cover {missing[0]}")
    for n, p in assignment.items():
        if n not in nodes:
            raise ValidationError(f"assignment names unknown operator {n}")
        if p not in nodes[n].supported_precisions:
            raise ValidationError(f"{n}: precision {p.value} is not supported")


def _find_cycle_edge(remaining, succs):
    # DFS over the leftover (cyclic) subgraph until a back edge shows up
    color = {}
    members = set(remaining)
    for root in remaining:
        if root in color:
            continue
        stack = [(root, iter(succs[root]))]
        color[root] = 1
        while stack:
            node, it = stack[-1]
            for nxt in it:
                if nxt not in members:
                    continue
                if color.get(nxt) == 1:
                    return (node, nxt)
                if nxt not in color:
                    color[nxt] = 1
                    stack.append((nxt, iter(succs[nxt])))
                    break
            else:
                color[node] = 2
                stack.pop()
    raise AssertionError("no cycle found in cyclic remainder")


def _topo_order(ids, preds, succs):
    position = {n: i for i, n in enumerate(ids)}
    indeg = {n: len(preds[n]) for n in ids}
    ready = [(position[n], n) for n in ids if indeg[n] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        _, n = heapq.heappop(ready)
        order.append(n)
        for s in succs[n]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(ready, (position[s], s))
    if len(order) != len(ids):
        remaining = [n for n in ids if indeg[n] > 0]
        raise GraphCycleError(_find_cycle_edge(remaining, succs))
    return order


def build_dag(
    nodes: Iterable[OperatorNode],
    edges: Iterable[tuple[str, str]],
    initial_assignment: Mapping[str, Precision],
) -> PrecisionDAG:
    nodes = list(nodes)
    ids = [n.id for n in nodes]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate operator id")
    edges = tuple((str(a), str(b)) for a, b in edges)
    preds: dict[str, list[str]] = {n: [] for n in ids}
    succs: dict[str, list[str]] = {n: [] for n in ids}
    for a, b in edges:
        if a not in preds or b not in preds:
            raise ValidationError(f"edge {a} -> {b} references an unknown operator")
        if b in succs[a]:
            continue
        succs[a].append(b)
        preds[b].append(a)

    order = _topo_order(ids, preds, succs)
    depth: dict[str, int] = {}
    for n in order:
        depth[n] = 1 + max((depth[p] for p in preds[n]), default=0)

    node_map = {n.id: replace(n, depth=depth[n.id]) for n in nodes}
    assignment = dict(initial_assignment)
    _check_assignment(node_map, assignment)
    return PrecisionDAG(
        nodes=MappingProxyType(node_map),
        edges=edges,
        assignment=MappingProxyType(assignment),
        order=tuple(order),
        preds=MappingProxyType({k: tuple(v) for k, v in preds.items()}),
        succs=MappingProxyType({k: tuple(v) for k, v in succs.items()}),
        model_depth=max(depth.values(), default=0),
        _index=MappingProxyType({n: i for i, n in enumerate(order)}),
    )


def compute_depths(dag: PrecisionDAG) -> tuple[dict[str, int], int]:
    """Longest-path depth of every operator (sources are 1) and the model depth."""
    depth: dict[str, int] = {}
    for n in dag.order:
        depth[n] = 1 + max((depth[p] for p in dag.preds[n]), default=0)
    return depth, max(depth.values(), default=0)


def _unanimous(dag, node, outputs):
    ps = dag.preds[node]
    if not ps:
        return None
    first = outputs(ps[0])
    for p in ps[1:]:
        if outputs(p) is not first:
            return None
    return first


def cascade(dag: PrecisionDAG, start: str, new_kernel: Precision) -> dict[str, Precision]:
    """Kernel precisions after setting ``start`` to ``new_kernel`` and propagating
    through dependent successors whose inputs agree.

    Only entries that were visited are returned (``start`` included). A dependent
    node with disagreeing inputs keeps its current precision and stops the walk.
    """
    changes = {start: new_kernel}
    _walk_dependents(dag, start, output_precision(new_kernel), changes)
    return changes


def _walk_dependents(dag, start, start_output, changes):
    override = {start: start_output}

    def out(n):
        if n in override:
            return override[n]
        return output_precision(dag.assignment[n])

    heap = []
    queued = set()

    def push_succs(n):
        for s in dag.succs[n]:
            if s not in queued and dag.nodes[s].kind is OperatorKind.DEPENDENT:
                queued.add(s)
                heapq.heappush(heap, (dag.topo_index(s), s))

    push_succs(start)
    reached = []
    while heap:
        _, s = heapq.heappop(heap)
        p = _unanimous(dag, s, out)
        if p is None or p not in dag.nodes[s].supported_precisions:
            continue
        reached.append(s)
        changes[s] = p
        override[s] = output_precision(p)
        push_succs(s)
    return reached


def dependent_closure(dag: PrecisionDAG, start: str, new_output_precision: Precision) -> set[str]:
    if start not in dag.nodes:
        raise ValidationError(f"unknown operator {start}")
    return set(_walk_dependents(dag, start, new_output_precision, {}))


def resolve_dependents(dag: PrecisionDAG, assignment: Mapping[str, Precision]) -> dict[str, Precision]:
    """From-scratch resolution: every dependent node whose inputs agree takes the
    common input precision; the rest keep the supplied value."""
    resolved = dict(assignment)
    for n in dag.order:
        if dag.nodes[n].kind is not OperatorKind.DEPENDENT:
            continue
        p = _unanimous(dag, n, lambda m: output_precision(resolved[m]))
        if p is not None and p in dag.nodes[n].supported_precisions:
            resolved[n] = p
    return resolved


def check_cascade_invariant(dag: PrecisionDAG) -> list[str]:
    """Dependent nodes that violate the unanimous-input rule."""
    return [n for n, p in resolve_dependents(dag, dag.assignment).items() if dag.assignment[n] is not p]


def node_to_dict(node: OperatorNode) -> dict:
    return {
        "id": node.id,
        "kind": node.kind.value,
        "has_weight": node.has_weight,
        "weight_numel": node.weight_numel,
        "output_numel": node.output_numel,
        "subgraph_id": node.subgraph_id,
        "supported_precisions": [p.value for p in node.supported_precisions],
    }


def node_from_dict(d: Mapping) -> OperatorNode:
    return OperatorNode(
        id=str(d["id"]),
        kind=OperatorKind(d["kind"]),
        has_weight=bool(d.get("has_weight", False)),
        weight_numel=int(d.get("weight_numel", 0)),
        output_numel=int(d["output_numel"]),
        subgraph_id=str(d.get("subgraph_id", "0")),
        supported_precisions=tuple(Precision(p) for p in d["supported_precisions"]),
    )


def dag_to_dict(dag: PrecisionDAG) -> dict:
    return {
        "nodes": [node_to_dict(dag.nodes[n]) for n in dag.nodes],
        "edges": [[a, b] for a, b in dag.edges],
        "assignment": {n: p.value for n, p in dag.assignment.items()},
    }


def dag_from_dict(d: Mapping) -> PrecisionDAG:
    nodes = [node_from_dict(n) for n in d["nodes"]]
    assignment = d.get("assignment")
    if assignment is None:
        assignment = {n.id: Precision.FP32 for n in nodes}
    else:
        assignment = {k: Precision(v) for k, v in assignment.items()}
    return build_dag(nodes, [tuple(e) for e in d["edges"]], assignment)


def uniform_assignment(dag: PrecisionDAG, p: Precision = Precision.FP32) -> dict[str, Precision]:
    """Adjustable ops at ``p`` where supported (FP32 otherwise), fixed ops as
    assigned, dependents resolved."""
    assignment = {}
    for n in dag.order:
        node = dag.nodes[n]
        if node.kind is OperatorKind.ADJUSTABLE:
            assignment[n] = p if p in node.supported_precisions else Precision.FP32
        elif node.kind is OperatorKind.FIXED:
            assignment[n] = dag.assignment[n]
        else:
            assignment[n] = Precision.FP32
    return resolve_dependents(dag, assignment)
