"""Precision allocation for inference devices.

Start from the fastest plan that fits memory (brute force per isomorphic
subgraph), then greedily raise operator precisions in order of the largest
perturbation decrement while memory and throughput still hold.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

from .costmap import cost_mapping
from .errors import EnumerationLimitError, InfeasibleError, InvariantError, ValidationError
from .graph import OperatorKind, Precision, PrecisionDAG, resolve_dependents, uniform_assignment
from .indicator import PerturbationScore, score_all
from .profile import DEFAULT_WINDOW, CastCostModel, LossSpec, OpCostProfile, ProfileBundle
from .replay import Cluster, Timeline, estimate_memory, simulate, throughput

log = logging.getLogger(__name__)

DEFAULT_MAX_OPS = 8
EXHAUSTIVE_LIMIT = 729

Plan = dict[str, dict[str, Precision]]


@dataclass
class AllocProblem:
    bundle: ProfileBundle
    loss: LossSpec
    scores: PerturbationScore
    mem_caps: dict[str, int]
    t_min: float | None = None
    max_ops: int = DEFAULT_MAX_OPS
    literal_t_min: bool = False

    def __post_init__(self):
        for dev in self.bundle.inference_devices:
            if dev not in self.mem_caps:
                raise ValidationError(f"no memory cap for inference device {dev}")

    @classmethod
    def from_bundle(
        cls,
        bundle: ProfileBundle,
        loss: LossSpec | None = None,
        mem_caps: Mapping[str, int] | None = None,
        window: int = DEFAULT_WINDOW,
        **kwargs,
    ) -> "AllocProblem":
        loss = loss or bundle.loss
        caps = {d.id: d.mem_capacity_bytes for d in bundle.devices if d.is_inference}
        if mem_caps:
            caps.update(mem_caps)
        scores = score_all(bundle.graph, bundle.stats(window), loss)
        return cls(bundle, loss, scores, caps, **kwargs)


def _subgraph_memory(dag, costs, members, overrides):
    assignment = uniform_assignment(dag, Precision.FP32)
    assignment.update(overrides)
    resolved = resolve_dependents(dag, assignment)
    return sum(costs.memory(op, resolved[op]) for op in members)


def partition_budget(dag: PrecisionDAG, M_max: int, op_costs: OpCostProfile) -> dict[str, Fraction]:
    """Split the required memory reduction across subgraphs in proportion to
    how much each can shrink when all its adjustable ops go to their lowest
    precision. Budgets are exact fractions of a byte."""
    groups = dag.subgraphs()
    fp32 = {}
    lowest = {}
    for sg, members in groups.items():
        adj = [op for op in members if dag.nodes[op].kind is OperatorKind.ADJUSTABLE]
        fp32[sg] = _subgraph_memory(dag, op_costs, members, {})
        lowest[sg] = _subgraph_memory(dag, op_costs, members, {op: dag.nodes[op].lowest_precision for op in adj})
    capacity = {sg: max(0, fp32[sg] - lowest[sg]) for sg in groups}
    total_cap = sum(capacity.values())
    required = max(0, sum(fp32.values()) - M_max)
    if required > total_cap:
        raise InfeasibleError(
            f"infeasible: memory cap {M_max} B needs a {required} B reduction but at most {total_cap} B can be saved"
        )
    budgets = {}
    for sg in groups:
        cut = Fraction(required * capacity[sg], total_cap) if total_cap else Fraction(0)
        budgets[sg] = max(Fraction(fp32[sg]) - cut, Fraction(lowest[sg]))
    return budgets


def initial_plan(
    dag: PrecisionDAG,
    budgets: Mapping[str, Fraction],
    op_costs: OpCostProfile,
    cast: CastCostModel,
    max_ops: int = DEFAULT_MAX_OPS,
    remap=None,
) -> dict[str, Precision]:
    """Fastest per-subgraph precision choice that fits each subgraph budget.

    Subgraphs are settled in topological order; later subgraphs stay FP32
    while an earlier one is enumerated. Candidates are ranked by the device's
    total compute-plus-cast time, so casts at subgraph boundaries count.
    """
    if remap is None:
        from .costmap import full_remap

        def remap(assignment):
            return full_remap(dag, assignment, op_costs, cast)[0]

    current = uniform_assignment(dag, Precision.FP32)
    for sg, members in dag.subgraphs().items():
        adj = [op for op in members if dag.nodes[op].kind is OperatorKind.ADJUSTABLE]
        if not adj:
            continue
        if len(adj) > max_ops:
            raise EnumerationLimitError(
                f"subgraph {sg} has {len(adj)} adjustable operators (limit {max_ops}); split it"
            )
        choices = [sorted(dag.nodes[op].supported_precisions) for op in adj]
        best = None
        for combo in itertools.product(*choices):
            cand = dict(current)
            cand.update(zip(adj, combo))
            resolved = resolve_dependents(dag, cand)
            mem = sum(op_costs.memory(op, resolved[op]) for op in members)
            if mem > budgets[sg]:
                continue
            key = (remap(resolved).compute_total, tuple(p.bit_width for p in combo))
            if best is None or key < best[0]:
                best = (key, combo)
        if best is None:
            raise InfeasibleError(f"infeasible: no precision combination of subgraph {sg} fits {float(budgets[sg]):.0f} B")
        current.update(zip(adj, best[1]))
        current = resolve_dependents(dag, current)
    return current


@dataclass
class AuditEntry:
    device: str
    op: str
    from_p: Precision
    to_p: Precision
    delta: float
    accepted: bool
    reason: str
    total_omega: float
    throughput: float
    memory: int

    def to_dict(self) -> dict:
        return {
            "device": self.device,
            "op": self.op,
            "from": self.from_p.value,
            "to": self.to_p.value,
            "delta_omega": self.delta,
            "accepted": self.accepted,
            "reason": self.reason,
            "total_omega": self.total_omega,
            "throughput_it_s": self.throughput,
            "memory_bytes": self.memory,
        }


@dataclass
class RecoveryResult:
    plan: Plan
    timeline: Timeline
    t_min: float
    audit: list[AuditEntry] = field(default_factory=list)


def total_omega(scores: PerturbationScore, plan: Mapping[str, Mapping[str, Precision]], devices) -> float:
    return math.fsum(scores.total(plan[d]) for d in devices)


def uniform_lowest_plan(cluster: Cluster) -> Plan:
    plan = cluster.fp32_plan()
    for dev in cluster.inference:
        low = {op: cluster.dag.nodes[op].lowest_precision for op in cluster.dag.adjustable()}
        plan[dev] = resolve_dependents(cluster.dag, {**plan[dev], **low})
    return plan


def recover(problem: AllocProblem, initial: Plan, cluster: Cluster | None = None) -> RecoveryResult:
    cluster = cluster or Cluster(problem.bundle)
    scores = problem.scores
    dags = {dev: cluster.device_dag(initial[dev]) for dev in cluster.devices}
    dfgs = {dev: cluster.local_dfg(dev, dags[dev]) for dev in cluster.devices}
    for dev in cluster.inference:
        mem = estimate_memory(dags[dev], cluster.costs(dev))
        if mem > problem.mem_caps[dev]:
            raise InfeasibleError(f"infeasible: initial plan uses {mem} B on {dev}, cap is {problem.mem_caps[dev]} B")

    timeline = simulate(cluster.global_dfg(dfgs))
    if problem.t_min is not None:
        t_min = problem.t_min
    elif problem.literal_t_min:
        t_min = throughput(cluster.evaluate(uniform_lowest_plan(cluster))[0])
    else:
        t_min = throughput(timeline)

    heaps: dict[str, list] = {}
    for dev in cluster.inference:
        h = []
        for op in cluster.dag.adjustable():
            b = dags[dev].assignment[op]
            delta = scores.delta(op, b)
            if delta is not None:
                h.append((-delta, op, b))
        heapq.heapify(h)
        heaps[dev] = h

    omega_now = total_omega(scores, {d: dags[d].assignment for d in cluster.inference}, cluster.inference)
    audit = []
    while any(heaps.values()):
        for dev in cluster.inference:
            if not heaps[dev]:
                continue
            neg_delta, op, b = heapq.heappop(heaps[dev])
            delta = -neg_delta
            nxt = cluster.dag.nodes[op].higher_supported(b)
            new_dag, new_dfg, _ = cost_mapping(dags[dev], dfgs[dev], op, nxt, cluster.costs(dev), cluster.cast)
            mem = estimate_memory(new_dag, cluster.costs(dev))
            trial = simulate(cluster.global_dfg({**dfgs, dev: new_dfg}))
            tp = throughput(trial)
            if delta <= 0:
                reason = "no-gain"
            elif mem > problem.mem_caps[dev]:
                reason = "memory"
            elif tp < t_min:
                reason = "throughput"
            else:
                reason = "ok"
            accepted = reason == "ok"
            if accepted:
                dags[dev], dfgs[dev], timeline = new_dag, new_dfg, trial
                omega_now = total_omega(scores, {d: dags[d].assignment for d in cluster.inference}, cluster.inference)
                further = scores.delta(op, nxt)
                if further is not None:
                    heapq.heappush(heaps[dev], (-further, op, nxt))
            log.debug("%s %s %s->%s delta=%g %s", dev, op, b.value, nxt.value, delta, reason)
            audit.append(AuditEntry(dev, op, b, nxt, delta, accepted, reason, omega_now, tp, mem))

    plan = {dev: dict(dags[dev].assignment) for dev in cluster.devices}
    return RecoveryResult(plan, timeline, t_min, audit)


def enumerate_plans(problem: AllocProblem, cluster: Cluster, t_min: float, base: Plan):
    """Yield ``(plan, omega, throughput, feasible)`` over every assignment of the
    inference devices' adjustable operators. Only for tiny instances."""
    ops = cluster.dag.adjustable()
    slots = [(dev, op) for dev in cluster.inference for op in ops]
    choices = [sorted(cluster.dag.nodes[op].supported_precisions) for _, op in slots]
    for combo in itertools.product(*choices):
        plan = {dev: dict(base[dev]) for dev in cluster.devices}
        for (dev, op), p in zip(slots, combo):
            plan[dev][op] = p
        for dev in cluster.inference:
            plan[dev] = resolve_dependents(cluster.dag, plan[dev])
        tl, mem = cluster.evaluate(plan)
        tp = throughput(tl)
        ok = tp >= t_min and all(mem[d] <= problem.mem_caps[d] for d in cluster.inference)
        yield plan, total_omega(problem.scores, plan, cluster.inference), tp, ok


def _plan_size(cluster: Cluster) -> int:
    n = 1
    for _dev in cluster.inference:
        for op in cluster.dag.adjustable():
            n *= len(cluster.dag.nodes[op].supported_precisions)
    return n


def solve(problem: AllocProblem) -> tuple[Plan, Timeline, dict]:
    cluster = Cluster(problem.bundle)
    initial = cluster.fp32_plan()
    for dev in cluster.inference:
        costs = cluster.costs(dev)
        budgets = partition_budget(cluster.dag, problem.mem_caps[dev], costs)
        initial[dev] = initial_plan(
            cluster.dag, budgets, costs, cluster.cast, problem.max_ops, remap=lambda a, d=dev: cluster.remap(d, a)
        )
        mem = estimate_memory(cluster.device_dag(initial[dev]), costs)
        if mem > problem.mem_caps[dev]:
            raise InfeasibleError(
                f"infeasible: assembled initial plan uses {mem} B on {dev}, cap is {problem.mem_caps[dev]} B"
            )

    result = recover(problem, initial, cluster)

    # re-check both constraints from scratch instead of trusting the search
    timeline, memory = cluster.evaluate(result.plan)
    tp = throughput(timeline)
    if timeline.makespan != result.timeline.makespan:
        raise InvariantError("incremental and from-scratch simulations disagree")
    for dev in cluster.inference:
        if memory[dev] > problem.mem_caps[dev]:
            raise InvariantError(f"final plan exceeds memory cap on {dev}")
    if tp < result.t_min and any(a.accepted for a in result.audit):
        raise InvariantError("final plan is slower than the throughput floor")

    omega_before = total_omega(problem.scores, initial, cluster.inference)
    omega_after = total_omega(problem.scores, result.plan, cluster.inference)
    report = {
        "total_omega_initial": omega_before,
        "total_omega": omega_after,
        "predicted_throughput_it_s": tp,
        "t_min_it_s": result.t_min,
        "makespan_ns": timeline.makespan,
        "memory_bytes": memory,
        "mem_caps_bytes": {d: problem.mem_caps[d] for d in cluster.inference},
        "initial_plan": {d: {op: p.value for op, p in initial[d].items()} for d in cluster.devices},
        "audit": [a.to_dict() for a in result.audit],
    }
    if cluster.inference and _plan_size(cluster) <= EXHAUSTIVE_LIMIT:
        best = min(
            (om for _, om, _, ok in enumerate_plans(problem, cluster, result.t_min, initial) if ok), default=None
        )
        if best is not None:
            report["exhaustive_best_omega"] = best
            report["optimality_gap"] = omega_after - best
    return result.plan, timeline, report


def plan_to_json(plan: Plan, report: Mapping) -> dict:
    out = {
        "devices": {dev: {op: p.value for op, p in ops.items()} for dev, ops in plan.items()},
        "predicted_throughput_it_s": report["predicted_throughput_it_s"],
        "total_omega": report["total_omega"],
        "audit": report["audit"],
    }
    for key in ("total_omega_initial", "t_min_it_s", "makespan_ns", "memory_bytes", "exhaustive_best_omega", "optimality_gap"):
        if key in report:
            out[key] = report[key]
    return out


def plan_from_json(data: Mapping) -> Plan:
    try:
        devices = data["devices"]
        return {dev: {op: Precision(p) for op, p in ops.items()} for dev, ops in devices.items()}
    except (KeyError, ValueError, AttributeError, TypeError) as e:
        raise ValidationError(f"malformed plan file: {e}") from None
