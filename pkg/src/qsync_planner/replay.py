"""Global DFG simulation: per-device compute lines coupled by synchronized
bucketed all-reduce slots."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

from .costmap import LocalDFG, build_local_dfg, full_remap
from .errors import DomainError, TopologyError, ValidationError
from .graph import Precision, PrecisionDAG, resolve_dependents, uniform_assignment
from .profile import CastCostModel, OpCostProfile, ProfileBundle


@dataclass(frozen=True)
class GlobalDFG:
    locals: Mapping[str, LocalDFG]
    comm_durations: Mapping[str, tuple[int, ...]]
    inference: frozenset = frozenset()

    @property
    def devices(self) -> list[str]:
        return list(self.locals)


@dataclass
class Timeline:
    events: dict[str, list[tuple[str, int, int]]] = field(default_factory=dict)
    ready: dict[str, list[int]] = field(default_factory=dict)
    comm_start: list[int] = field(default_factory=list)
    comm_end: dict[str, list[int]] = field(default_factory=dict)
    makespan: int = 0

    def sync_wait(self, dev: str) -> int:
        """Total time buckets on ``dev`` sat ready before their all-reduce began."""
        return sum(s - r for s, r in zip(self.comm_start, self.ready[dev]))


def simulate(g: GlobalDFG) -> Timeline:
    devices = g.devices
    for dev in g.comm_durations:
        if dev not in g.locals:
            raise TopologyError(f"communication profile names unknown device {dev}")
    slot_counts = {len(g.locals[d].hooks) for d in devices} | {len(g.comm_durations.get(d, ())) for d in devices}
    if len(slot_counts) > 1:
        raise TopologyError(f"devices disagree on communication slot count: {sorted(slot_counts)}")
    n_slots = slot_counts.pop() if slot_counts else 0

    t = Timeline()
    clock = {}
    for dev in devices:
        dfg = g.locals[dev]
        now = 0
        rows = []
        for e in dfg.events:
            if e.kind == "optimizer":
                break
            rows.append((e.name, now, now + e.duration))
            now += e.duration
        t.events[dev] = rows
        t.ready[dev] = [rows[i][2] for i in dfg.hooks]
        clock[dev] = now

    prev_end = 0
    for n in range(n_slots):
        start = max(max(t.ready[d][n] for d in devices), prev_end)
        end = start + max(g.comm_durations[d][n] for d in devices)
        t.comm_start.append(start)
        prev_end = end
    for dev in devices:
        t.comm_end[dev] = [
            s + max(g.comm_durations[d][n] for d in devices) for n, s in enumerate(t.comm_start)
        ]

    makespan = 0
    for dev in devices:
        dfg = g.locals[dev]
        now = clock[dev]
        tail = [e for e in dfg.events if e.kind == "optimizer"]
        if tail and n_slots:
            now = max(now, prev_end)
        for e in tail:
            t.events[dev].append((e.name, now, now + e.duration))
            now += e.duration
        makespan = max(makespan, now, prev_end if n_slots else 0)
    t.makespan = makespan
    return t


def estimate_memory(dag: PrecisionDAG, op_costs: OpCostProfile) -> int:
    return sum(op_costs.memory(op, p) for op, p in dag.assignment.items())


def throughput(t: Timeline | int) -> float:
    makespan = t if isinstance(t, int) else t.makespan
    if makespan <= 0:
        raise DomainError("makespan must be positive to compute throughput")
    return 1e9 / makespan


def trace_events(t: Timeline) -> list[dict]:
    out = []
    for dev, rows in t.events.items():
        for name, start, end in rows:
            out.append(
                {"name": name, "ph": "X", "pid": dev, "tid": 0, "ts": start / 1000, "dur": (end - start) / 1000}
            )
        for n, start in enumerate(t.comm_start):
            end = t.comm_end[dev][n]
            out.append(
                {"name": f"allreduce:{n}", "ph": "X", "pid": dev, "tid": 1, "ts": start / 1000, "dur": (end - start) / 1000}
            )
    return out


def export_trace(t: Timeline, path) -> None:
    with open(path, "w") as f:
        json.dump({"traceEvents": trace_events(t), "displayTimeUnit": "ns"}, f, sort_keys=True)
        f.write("\n")


class Cluster:
    """Binds a profile bundle to per-device DAGs and DFGs."""

    def __init__(self, bundle: ProfileBundle, cast: CastCostModel | None = None):
        self.bundle = bundle
        self.cast = cast if cast is not None else bundle.cast_model()
        self.dag = bundle.graph
        self.devices = [d.id for d in bundle.devices]
        self.inference = [d.id for d in bundle.devices if d.is_inference]
        self._hooks = {dev: self._hook_ops(dev) for dev in self.devices}

    def costs(self, dev: str) -> OpCostProfile:
        return self.bundle.costs_for(dev)

    def hook_ops(self, dev: str) -> tuple[str, ...]:
        return self._hooks[dev]

    def _hook_ops(self, dev):
        slots = self.bundle.comm.get(dev, ())
        if all(s.after_op is not None for s in slots):
            return tuple(s.after_op for s in slots)
        # place each bucket after the first backward event that finishes no
        # earlier than its traced ready offset in the all-FP32 baseline
        base = build_local_dfg(
            self.dag.with_assignment(uniform_assignment(self.dag, Precision.FP32)), self.costs(dev), self.cast
        )
        now = 0
        ends = []
        for e in base.events:
            now += e.duration
            if e.kind == "bwd":
                ends.append((now, e.op))
        hooks = []
        pos = 0
        for s in slots:
            if s.after_op is not None:
                idx = next(i for i, (_, op) in enumerate(ends) if op == s.after_op)
            else:
                idx = next((i for i, (end, _) in enumerate(ends) if end >= s.earliest_ready_offset), len(ends) - 1)
            pos = max(pos, idx)
            hooks.append(ends[pos][1])
        return tuple(hooks)

    def device_dag(self, assignment: Mapping[str, Precision]) -> PrecisionDAG:
        return self.dag.with_assignment(resolve_dependents(self.dag, assignment))

    def local_dfg(self, dev: str, dag: PrecisionDAG) -> LocalDFG:
        return build_local_dfg(dag, self.costs(dev), self.cast, self._hooks[dev], self.bundle.device(dev).optimizer_ns)

    def remap(self, dev: str, assignment: Mapping[str, Precision]) -> LocalDFG:
        dfg, _ = full_remap(
            self.dag, assignment, self.costs(dev), self.cast, self._hooks[dev], self.bundle.device(dev).optimizer_ns
        )
        return dfg

    def global_dfg(self, locals_: Mapping[str, LocalDFG]) -> GlobalDFG:
        return GlobalDFG(
            locals=dict(locals_),
            comm_durations={d: tuple(s.duration for s in self.bundle.comm.get(d, ())) for d in self.devices},
            inference=frozenset(self.inference),
        )

    def fp32_plan(self) -> dict[str, dict[str, Precision]]:
        base = uniform_assignment(self.dag, Precision.FP32)
        return {dev: dict(base) for dev in self.devices}

    def check_plan(self, plan: Mapping[str, Mapping[str, Precision]]) -> None:
        for dev in self.devices:
            if dev not in plan:
                raise ValidationError(f"plan has no entry for device {dev}")
        for dev, assignment in plan.items():
            if dev not in self.devices:
                raise ValidationError(f"plan names unknown device {dev}")
            for op in assignment:
                if op not in self.dag.nodes:
                    raise ValidationError(f"plan names unknown operator {op} on {dev}")

    def evaluate(self, plan: Mapping[str, Mapping[str, Precision]]) -> tuple[Timeline, dict[str, int]]:
        """Simulated timeline and per-device memory for a full cluster plan."""
        self.check_plan(plan)
        locals_ = {}
        memory = {}
        for dev in self.devices:
            assignment = dict(self.dag.assignment)
            assignment.update(plan[dev])
            dag = self.device_dag(assignment)
            locals_[dev] = self.local_dfg(dev, dag)
            memory[dev] = estimate_memory(dag, self.costs(dev))
        return simulate(self.global_dfg(locals_)), memory
