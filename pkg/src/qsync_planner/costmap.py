"""Cost mapping: turn a precision assignment into per-operator casting and
kernel costs, and keep a device's local data-flow graph (DFG) in sync with
single-operator precision changes."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from types import MappingProxyType
from typing import Mapping, Sequence

from .errors import KindError, ValidationError
from .graph import (
    OperatorKind,
    Precision,
    PrecisionDAG,
    backward_precision,
    cascade,
    output_precision,
    resolve_dependents,
)
from .profile import CastCostModel, OpCostProfile, predict_cast_cost

__all__ = [
    "CostBreakdown",
    "Event",
    "LocalDFG",
    "output_precision",
    "node_cost",
    "build_local_dfg",
    "cost_mapping",
    "full_remap",
]


@dataclass(frozen=True)
class CostBreakdown:
    fwd_cast: int = 0
    weight_cast: int = 0
    bwd_cast: int = 0
    pure_op: int = 0
    pure_fwd: int = 0

    @property
    def total(self) -> int:
        return self.fwd_cast + self.weight_cast + self.bwd_cast + self.pure_op

    @property
    def fwd_duration(self) -> int:
        return self.pure_fwd + self.fwd_cast + self.weight_cast

    @property
    def bwd_duration(self) -> int:
        return self.pure_op - self.pure_fwd + self.bwd_cast

    def __add__(self, other: "CostBreakdown") -> "CostBreakdown":
        return CostBreakdown(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))


@dataclass(frozen=True)
class Event:
    name: str
    kind: str  # "fwd" | "bwd" | "optimizer"
    duration: int
    op: str | None = None


@dataclass(frozen=True)
class LocalDFG:
    """One device's execution line.

    ``hooks[n]`` is the index of the backward event after which communication
    slot ``n`` becomes ready. ``costs`` is empty for hand-built DFGs.
    """

    events: tuple[Event, ...]
    hooks: tuple[int, ...] = ()
    costs: Mapping[str, CostBreakdown] = field(default_factory=dict)

    def __post_init__(self):
        for idx in self.hooks:
            if not 0 <= idx < len(self.events) or self.events[idx].kind != "bwd":
                raise ValidationError(f"communication hook at {idx} is not a backward event")
        if list(self.hooks) != sorted(self.hooks):
            raise ValidationError("communication hooks must follow execution order")
        seen_opt = False
        for e in self.events:
            if e.kind == "optimizer":
                seen_opt = True
            elif seen_opt:
                raise ValidationError("only optimizer events may follow an optimizer event")
            if e.duration < 0:
                raise ValidationError(f"event {e.name} has negative duration")

    @property
    def compute_total(self) -> int:
        return sum(e.duration for e in self.events)

    def total_costs(self) -> CostBreakdown:
        total = CostBreakdown()
        for c in self.costs.values():
            total = total + c
        return total

    def __eq__(self, other):
        if not isinstance(other, LocalDFG):
            return NotImplemented
        return self.events == other.events and self.hooks == other.hooks and dict(self.costs) == dict(other.costs)


def _cast(cast, src, dst, numel):
    if src is dst:
        return 0
    return predict_cast_cost(cast, src, dst, numel)


def node_cost(dag: PrecisionDAG, op: str, costs: OpCostProfile, cast: CastCostModel) -> CostBreakdown:
    """Casting and kernel cost of ``op`` under ``dag.assignment``.

    Forward casts of an edge are charged to the consumer; gradient casts of an
    edge are charged to the producer's backward event.
    """
    node = dag.nodes[op]
    kernel = dag.assignment[op]
    fwd_cast = 0
    for p in dag.preds[op]:
        fwd_cast += _cast(cast, dag.output_of(p), kernel, dag.nodes[p].output_numel)
    weight_cast = 0
    if node.kind is OperatorKind.ADJUSTABLE and node.has_weight:
        weight_cast = _cast(cast, Precision.FP32, kernel, node.weight_numel)
    grad_p = backward_precision(kernel)
    bwd_cast = 0
    for s in dag.succs[op]:
        bwd_cast += _cast(cast, backward_precision(dag.assignment[s]), grad_p, node.output_numel)
    if kernel is Precision.INT8 and node.has_weight:
        # weight gradients leave fixed-point kernels as FP32
        bwd_cast += _cast(cast, Precision.INT8, Precision.FP32, node.weight_numel)
    entry = costs.get(op, kernel)
    return CostBreakdown(fwd_cast, weight_cast, bwd_cast, entry.pure_ns, entry.fwd_share)


def _layout(order):
    n = len(order)
    fwd = {op: i for i, op in enumerate(order)}
    bwd = {op: n + (n - 1 - i) for i, op in enumerate(order)}
    return fwd, bwd


def build_local_dfg(
    dag: PrecisionDAG,
    costs: OpCostProfile,
    cast: CastCostModel,
    hook_ops: Sequence[str] = (),
    optimizer_ns: int = 0,
) -> LocalDFG:
    """Local DFG for ``dag.assignment`` taken as-is (no dependent resolution)."""
    per_op = {op: node_cost(dag, op, costs, cast) for op in dag.order}
    events = [Event(f"fwd:{op}", "fwd", per_op[op].fwd_duration, op) for op in dag.order]
    events += [Event(f"bwd:{op}", "bwd", per_op[op].bwd_duration, op) for op in reversed(dag.order)]
    events.append(Event("optimizer", "optimizer", optimizer_ns))
    _, bwd_idx = _layout(dag.order)
    hooks = tuple(bwd_idx[op] for op in hook_ops)
    return LocalDFG(tuple(events), hooks, MappingProxyType(per_op))


def full_remap(
    dag: PrecisionDAG,
    assignment: Mapping[str, Precision],
    costs: OpCostProfile,
    cast: CastCostModel,
    hook_ops: Sequence[str] = (),
    optimizer_ns: int = 0,
) -> tuple[LocalDFG, CostBreakdown]:
    """Rebuild the whole local DFG from scratch for ``assignment``."""
    resolved = resolve_dependents(dag, assignment)
    dfg = build_local_dfg(dag.with_assignment(resolved), costs, cast, hook_ops, optimizer_ns)
    return dfg, dfg.total_costs()


def cost_mapping(
    dag: PrecisionDAG,
    dfg: LocalDFG,
    op: str,
    new_p: Precision,
    op_costs: OpCostProfile,
    cast: CastCostModel,
) -> tuple[PrecisionDAG, LocalDFG, CostBreakdown]:
    """Set ``op`` to ``new_p``, cascade through dependents, refresh affected costs.

    Only operators whose precision was visited, plus their direct neighbours,
    are re-costed; every other event keeps its duration.
    """
    node = dag.nodes.get(op)
    if node is None:
        raise ValidationError(f"unknown operator {op}")
    if node.kind is not OperatorKind.ADJUSTABLE:
        raise KindError(f"{op} is {node.kind.value}; only adjustable operators can be set")
    if new_p not in node.supported_precisions:
        raise ValidationError(f"{op}: precision {new_p.value} is not supported")

    changes = cascade(dag, op, new_p)
    new_dag = dag.with_assignment(changes)

    dirty = set()
    for n in changes:
        dirty.add(n)
        dirty.update(new_dag.preds[n])
        dirty.update(new_dag.succs[n])

    per_op = dict(dfg.costs)
    events = list(dfg.events)
    fwd_idx, bwd_idx = _layout(new_dag.order)
    for n in sorted(dirty, key=new_dag.topo_index):
        c = node_cost(new_dag, n, op_costs, cast)
        per_op[n] = c
        events[fwd_idx[n]] = Event(f"fwd:{n}", "fwd", c.fwd_duration, n)
        events[bwd_idx[n]] = Event(f"bwd:{n}", "bwd", c.bwd_duration, n)

    new_dfg = LocalDFG(tuple(events), dfg.hooks, MappingProxyType(per_op))
    return new_dag, new_dfg, per_op[op]
