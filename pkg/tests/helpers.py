"""Fixture builders, random instance generators and independent oracles."""

from __future__ import annotations

import heapq
import random

from qsync_planner.costmap import Event, LocalDFG
from qsync_planner.graph import (
    OperatorKind,
    OperatorNode,
    Precision,
    backward_precision,
    build_dag,
    output_precision,
)
from qsync_planner.profile import CastCostModel, LinearCost, OpCost, OpCostProfile, bundle_from_dict, cast_scheme, predict_cast_cost
from qsync_planner.replay import GlobalDFG

INT8, FP16, FP32 = Precision.INT8, Precision.FP16, Precision.FP32
ADJ, DEP, FIX = OperatorKind.ADJUSTABLE, OperatorKind.DEPENDENT, OperatorKind.FIXED
ALL = (INT8, FP16, FP32)

# filled by the acceptance tests, printed by conftest
ACCEPTANCE_LINES: list[str] = []


def node(id, kind=ADJ, out=100, weight=0, supported=None, subgraph="0"):
    if supported is None:
        supported = ALL if kind is ADJ else (FP16, FP32) if kind is DEP else (FP32,)
    return OperatorNode(
        id=id,
        kind=kind,
        output_numel=out,
        has_weight=weight > 0,
        weight_numel=weight,
        subgraph_id=subgraph,
        supported_precisions=tuple(supported),
    )


def fp32(nodes):
    return {n.id: FP32 for n in nodes}


def cast_model(a=1.0, b=100.0, quant=None, dequant=None):
    """Linear cast models for every ordered precision pair."""
    quant = quant or (a, b)
    dequant = dequant or (a, b)
    models = {}
    for src in ALL:
        for dst in ALL:
            if src is dst:
                continue
            scheme = cast_scheme(src, dst)
            coef = quant if scheme == "quantize_fixed" else dequant if scheme == "dequantize_fixed" else (a, b)
            models[(src, dst, scheme)] = LinearCost(*coef)
    return CastCostModel(models)


def flat_costs(dag, pure=None, memory=None):
    pure = pure or {INT8: 600, FP16: 900, FP32: 1500}
    memory = memory or {INT8: 100, FP16: 200, FP32: 400}
    return OpCostProfile(
        {(op, p): OpCost(pure[p], memory[p]) for op, n in dag.nodes.items() for p in n.supported_precisions}
    )


def f1():
    """src -> linear -> relu -> sink chain."""
    nodes = [
        node("src", FIX, out=1000),
        node("linear", ADJ, out=1500, weight=2000),
        node("relu", DEP, out=1500),
        node("sink", FIX, out=1),
    ]
    return build_dag(nodes, [("src", "linear"), ("linear", "relu"), ("relu", "sink")], fp32(nodes))


def random_dag(rng: random.Random, max_nodes=30):
    n = rng.randint(1, max_nodes)
    nodes = []
    for i in range(n):
        kind = rng.choice([ADJ, ADJ, DEP, DEP, FIX])
        if kind is ADJ:
            supported = rng.choice([ALL, ALL, (FP16, FP32), (INT8, FP32), (FP32,)])
            weight = rng.choice([0, rng.randint(1, 5000)])
        elif kind is DEP:
            supported = rng.choice([(FP16, FP32), (FP16, FP32), (FP32,), ALL])
            weight = 0
        else:
            supported, weight = (FP32,), 0
        nodes.append(node(f"n{i:02d}", kind, out=rng.randint(0, 4000), weight=weight, supported=supported,
                          subgraph=str(i // 4)))
    edges = []
    for j in range(1, n):
        for i in range(max(0, j - 6), j):
            if rng.random() < 0.3:
                edges.append((nodes[i].id, nodes[j].id))
    dag = build_dag(nodes, edges, fp32(nodes))
    return dag


def random_costs(rng: random.Random, dag):
    entries = {}
    for op, n in dag.nodes.items():
        base = rng.randint(100, 5000)
        for p in n.supported_precisions:
            scale = {INT8: rng.uniform(0.3, 1.1), FP16: rng.uniform(0.4, 1.0), FP32: 1.0}[p]
            entries[(op, p)] = OpCost(max(1, int(base * scale)), int(rng.randint(10, 1000) * p.bit_width / 8))
    return OpCostProfile(entries)


def random_cast(rng: random.Random):
    models = {}
    for src in ALL:
        for dst in ALL:
            if src is not dst:
                models[(src, dst, cast_scheme(src, dst))] = LinearCost(rng.uniform(0, 0.5), rng.uniform(0, 200))
    return CastCostModel(models)


def brute_force_dependents(dag, assignment):
    """Iterate 'dependent node takes its unanimous input precision' to a fixed point."""
    cur = dict(assignment)
    changed = True
    while changed:
        changed = False
        for op, n in dag.nodes.items():
            if n.kind is not DEP or not dag.preds[op]:
                continue
            outs = {output_precision(cur[p]) for p in dag.preds[op]}
            if len(outs) == 1:
                (p,) = outs
                if p in n.supported_precisions and cur[op] is not p:
                    cur[op] = p
                    changed = True
    return cur


def random_global_dfg(rng: random.Random, max_devices=4, max_events=50, max_slots=5):
    n_dev = rng.randint(1, max_devices)
    n_slots = rng.randint(0, max_slots)
    locals_ = {}
    comm = {}
    for d in range(n_dev):
        n_fwd = rng.randint(1, max(1, (max_events - 1) // 2))
        n_bwd = rng.randint(max(1, n_slots), max(n_slots, max(1, (max_events - 1) // 2)))
        n_bwd = min(n_bwd, max_events - n_fwd - 1)
        n_bwd = max(n_bwd, n_slots, 1)
        events = [Event(f"f{i}", "fwd", rng.randint(0, 100)) for i in range(n_fwd)]
        events += [Event(f"b{i}", "bwd", rng.randint(0, 100)) for i in range(n_bwd)]
        n_opt = rng.randint(0, max(0, min(2, max_events - n_fwd - n_bwd)))
        events += [Event(f"o{i}", "optimizer", rng.randint(0, 50)) for i in range(n_opt)]
        hooks = sorted(rng.sample(range(n_fwd, n_fwd + n_bwd), n_slots)) if n_slots else []
        locals_[f"d{d}"] = LocalDFG(tuple(events), tuple(hooks))
        comm[f"d{d}"] = tuple(rng.randint(1, 60) for _ in range(n_slots))
    return GlobalDFG(locals_, comm)


def des_simulate(g: GlobalDFG):
    """Priority-queue discrete-event simulator used as an oracle for ``simulate``.

    Returns ``(events, comm_start, makespan)`` where events maps device to a
    list of ``(name, start, end)``.
    """
    devices = list(g.locals)
    n_slots = len(next(iter(g.comm_durations.values()))) if g.comm_durations else 0
    hook_slot = {d: {idx: n for n, idx in enumerate(g.locals[d].hooks)} for d in devices}
    pos = {d: 0 for d in devices}
    blocked = {d: False for d in devices}
    done = {d: [] for d in devices}
    ready = {n: set() for n in range(n_slots)}
    comm_start = [None] * n_slots
    comm_finished = [False] * n_slots
    last_comm_end = 0
    queue = []
    seq = 0
    finish_time = {d: 0 for d in devices}

    def push(t, kind, payload):
        nonlocal seq
        heapq.heappush(queue, (t, seq, kind, payload))
        seq += 1

    def start_next(d, now):
        evs = g.locals[d].events
        if pos[d] >= len(evs):
            finish_time[d] = now
            return
        ev = evs[pos[d]]
        if ev.kind == "optimizer" and n_slots and not comm_finished[-1]:
            blocked[d] = True
            return
        push(now + ev.duration, "compute", (d, pos[d], now))

    def try_comm(n, now):
        if comm_start[n] is not None:
            return
        if len(ready[n]) < len(devices):
            return
        if n > 0 and not comm_finished[n - 1]:
            return
        comm_start[n] = now
        push(now + max(g.comm_durations[d][n] for d in devices), "comm", n)

    for d in devices:
        start_next(d, 0)
    now = 0
    while queue:
        now, _, kind, payload = heapq.heappop(queue)
        if kind == "compute":
            d, idx, st = payload
            done[d].append((g.locals[d].events[idx].name, st, now))
            pos[d] += 1
            if idx in hook_slot[d]:
                n = hook_slot[d][idx]
                ready[n].add(d)
                try_comm(n, now)
            start_next(d, now)
        else:
            n = payload
            comm_finished[n] = True
            last_comm_end = now
            if n + 1 < n_slots:
                try_comm(n + 1, now)
            else:
                for d in devices:
                    if blocked[d]:
                        blocked[d] = False
                        start_next(d, now)
    makespan = max([finish_time[d] for d in devices] + [last_comm_end])
    return done, comm_start, makespan


def oracle_casts(dag, assignment, cast):
    """Casting cost per operator recomputed edge by edge from scratch."""
    fwd = {op: 0 for op in dag.nodes}
    bwd = {op: 0 for op in dag.nodes}
    weight = {op: 0 for op in dag.nodes}
    for a, b in dag.edges:
        out_a = output_precision(assignment[a])
        if out_a != assignment[b]:
            fwd[b] += predict_cast_cost(cast, out_a, assignment[b], dag.nodes[a].output_numel)
        g_b, g_a = backward_precision(assignment[b]), backward_precision(assignment[a])
        if g_b != g_a:
            bwd[a] += predict_cast_cost(cast, g_b, g_a, dag.nodes[a].output_numel)
    for op, n in dag.nodes.items():
        k = assignment[op]
        if n.kind is OperatorKind.ADJUSTABLE and n.has_weight and k is not FP32:
            weight[op] = predict_cast_cost(cast, FP32, k, n.weight_numel)
        if k is INT8 and n.has_weight:
            bwd[op] += predict_cast_cost(cast, INT8, FP32, n.weight_numel)
    return fwd, weight, bwd


STAT_DEFAULTS = {
    "norm_w_sq": 4.0,
    "norm_act_sq": 9.0,
    "norm_grad_act_sq": 2.0,
    "D_act": 1000,
    "D_w": 500,
    "D_grad": 1000,
    "q_act": 0.02,
    "q_w": 0.01,
    "e_act": 0,
    "e_w": -1,
    "e_grad": -2,
}


def hybrid_bundle_dict(n_blocks=6, slots=3):
    """Two devices: a fast FP32 training GPU and a slower inference GPU whose
    FP16 kernels outrun the training GPU."""
    nodes, edges = [], []
    prev = None
    for i in range(n_blocks):
        conv, relu = f"conv{i}", f"relu{i}"
        nodes.append({"id": conv, "kind": "adjustable", "has_weight": True, "weight_numel": 4000 + 500 * i,
                      "output_numel": 8000, "subgraph_id": f"block{i}", "supported_precisions": ["FP16", "FP32"]})
        nodes.append({"id": relu, "kind": "dependent", "has_weight": False, "weight_numel": 0,
                      "output_numel": 8000, "subgraph_id": f"block{i}", "supported_precisions": ["FP16", "FP32"]})
        if prev:
            edges.append([prev, conv])
        edges.append([conv, relu])
        prev = relu
    nodes.append({"id": "loss", "kind": "fixed", "has_weight": False, "weight_numel": 0, "output_numel": 1,
                  "subgraph_id": "head", "supported_precisions": ["FP32"]})
    edges.append([prev, "loss"])

    def rows(conv_fp32, conv_fp16):
        out = []
        for i in range(n_blocks):
            out += [
                {"op": f"conv{i}", "precision": "FP32", "pure_ns": conv_fp32, "memory_bytes": 64000},
                {"op": f"conv{i}", "precision": "FP16", "pure_ns": conv_fp16, "memory_bytes": 32000},
                {"op": f"relu{i}", "precision": "FP32", "pure_ns": 300, "memory_bytes": 32000},
                {"op": f"relu{i}", "precision": "FP16", "pure_ns": 200, "memory_bytes": 16000},
            ]
        out.append({"op": "loss", "precision": "FP32", "pure_ns": 150, "memory_bytes": 100})
        return out

    samples = []
    for src, dst in (("FP32", "FP16"), ("FP16", "FP32")):
        for numel in (1000, 4000, 16000, 64000):
            samples.append({"src": src, "dst": dst, "scheme": "float_to_float", "numel": numel,
                            "measured_ns": 0.01 * numel + 40})
    stats = []
    for it in range(3):
        snap = {}
        for i in range(n_blocks):
            s = dict(STAT_DEFAULTS)
            s["norm_w_sq"] = 4.0 + i + 0.1 * it
            s["norm_act_sq"] = 9.0 - i * 0.5
            s["e_act"] = i % 3
            snap[f"conv{i}"] = s
        stats.append(snap)
    ops = [f"conv{i}" for i in range(n_blocks)]
    hook_ops = [ops[max(0, n_blocks - 1 - k * (n_blocks // slots))] for k in range(slots)]
    hook_ops[-1] = "conv0"
    comm = {dev: [{"earliest_ready_offset": 0, "duration": 2500, "bucket_bytes": 1 << 20, "after_op": op}
                  for op in hook_ops] for dev in ("train0", "infer0")}
    return {
        "schema_version": 1,
        "graph": {"nodes": nodes, "edges": edges},
        "op_costs": {"v100": rows(3000, 1800), "t4": rows(6500, 1500)},
        "cast_samples": samples,
        "tensor_stats": stats,
        "comm": comm,
        "devices": [
            {"id": "train0", "is_inference": False, "mem_capacity_bytes": 1 << 30, "profile": "v100", "optimizer_ns": 500},
            {"id": "infer0", "is_inference": True, "mem_capacity_bytes": 1 << 30, "profile": "t4", "optimizer_ns": 800},
        ],
        "loss": {"kind": "ce_mean", "N": 64},
    }


def hybrid_bundle():
    return bundle_from_dict(hybrid_bundle_dict())


def random_problem_dict(rng: random.Random, max_adj=6):
    """Small random hybrid-cluster bundle: one training and one inference GPU,
    <= ``max_adj`` adjustable operators with all three precisions."""
    n_adj = rng.randint(1, max_adj)
    nodes, edges = [], []
    prev = None
    names = []
    for i in range(n_adj):
        a = f"op{i}"
        nodes.append({"id": a, "kind": "adjustable", "has_weight": True, "weight_numel": rng.randint(100, 4000),
                      "output_numel": rng.randint(100, 4000), "subgraph_id": f"s{i // 2}",
                      "supported_precisions": ["INT8", "FP16", "FP32"]})
        if prev:
            edges.append([prev, a])
        prev = a
        names.append(a)
        if rng.random() < 0.5:
            d = f"act{i}"
            nodes.append({"id": d, "kind": "dependent", "output_numel": rng.randint(100, 4000),
                          "subgraph_id": f"s{i // 2}", "supported_precisions": ["FP16", "FP32"]})
            edges.append([a, d])
            prev = d
    nodes.append({"id": "loss", "kind": "fixed", "output_numel": 1, "subgraph_id": "head",
                  "supported_precisions": ["FP32"]})
    edges.append([prev, "loss"])

    def rows(speed):
        out = []
        for n in nodes:
            base = rng.randint(500, 5000)
            for p in n["supported_precisions"]:
                factor = {"INT8": rng.uniform(0.25, 0.6), "FP16": rng.uniform(0.4, 0.8), "FP32": 1.0}[p]
                mem = {"INT8": 1, "FP16": 2, "FP32": 4}[p] * rng.randint(500, 1500)
                out.append({"op": n["id"], "precision": p, "pure_ns": max(1, int(base * factor * speed)),
                            "memory_bytes": mem})
        return out

    samples = []
    for src, dst, scheme in (("FP32", "FP16", "float_to_float"), ("FP16", "FP32", "float_to_float"),
                             ("FP32", "INT8", "quantize_fixed"), ("FP16", "INT8", "quantize_fixed"),
                             ("INT8", "FP32", "dequantize_fixed"), ("INT8", "FP16", "dequantize_fixed")):
        a, b = rng.uniform(0.0, 0.1), rng.uniform(0, 100)
        for numel in (100, 1000, 10000):
            samples.append({"src": src, "dst": dst, "scheme": scheme, "numel": numel, "measured_ns": a * numel + b})
    stats = [{n: {**STAT_DEFAULTS, "norm_w_sq": rng.uniform(0.5, 10), "norm_act_sq": rng.uniform(0.5, 10),
                  "e_act": rng.randint(-2, 2), "e_w": rng.randint(-3, 1)} for n in names}]
    bundle = {
        "schema_version": 1,
        "graph": {"nodes": nodes, "edges": edges},
        "op_costs": {"train": rows(0.6), "infer": rows(1.0)},
        "cast_samples": samples,
        "tensor_stats": stats,
        "comm": {dev: [{"earliest_ready_offset": 0, "duration": rng.randint(100, 3000), "bucket_bytes": 1024,
                        "after_op": names[0]}] for dev in ("t0", "i0")},
        "devices": [
            {"id": "t0", "is_inference": False, "mem_capacity_bytes": 10 ** 9, "profile": "train"},
            {"id": "i0", "is_inference": True, "mem_capacity_bytes": 10 ** 9, "profile": "infer"},
        ],
        "loss": {"kind": "mse_mean", "N": 32},
    }
    return bundle


F2_PURE = {INT8: 500, FP16: 800, FP32: 1500}
F2_MEMORY = {INT8: 100, FP16: 200, FP32: 400}
F2_CAST = {"float_to_float": (1.0, 100.0), "quantize_fixed": (5.0, 500.0), "dequantize_fixed": (3.0, 200.0)}


def f2_bundle_dict(cap=420):
    """src -> a -> b -> sink where a and b form one subgraph. INT8 kernels are
    the fastest but quantizing inputs and weights costs more than they save."""
    nodes = [
        {"id": "src", "kind": "fixed", "output_numel": 1000, "subgraph_id": "io", "supported_precisions": ["FP32"]},
        {"id": "a", "kind": "adjustable", "has_weight": True, "weight_numel": 1000, "output_numel": 1000,
         "subgraph_id": "m", "supported_precisions": ["INT8", "FP16", "FP32"]},
        {"id": "b", "kind": "adjustable", "has_weight": True, "weight_numel": 1000, "output_numel": 1000,
         "subgraph_id": "m", "supported_precisions": ["INT8", "FP16", "FP32"]},
        {"id": "sink", "kind": "fixed", "output_numel": 1, "subgraph_id": "io", "supported_precisions": ["FP32"]},
    ]
    edges = [["src", "a"], ["a", "b"], ["b", "sink"]]

    def rows(fp32_ns):
        out = [{"op": op, "precision": "FP32", "pure_ns": 300, "memory_bytes": 10} for op in ("src", "sink")]
        for op in ("a", "b"):
            for p in (INT8, FP16, FP32):
                pure = fp32_ns if p is FP32 and fp32_ns else F2_PURE[p]
                out.append({"op": op, "precision": p.value, "pure_ns": pure, "memory_bytes": F2_MEMORY[p]})
        return out

    samples = []
    for src in ALL:
        for dst in ALL:
            if src is dst:
                continue
            scheme = cast_scheme(src, dst)
            a, b = F2_CAST[scheme]
            samples += [{"src": src.value, "dst": dst.value, "scheme": scheme, "numel": n, "measured_ns": a * n + b}
                        for n in (100, 1000, 10000)]
    stats = [{op: dict(STAT_DEFAULTS) for op in ("a", "b")}]
    return {
        "schema_version": 1,
        "graph": {"nodes": nodes, "edges": edges},
        "op_costs": {"train": rows(3000), "infer": rows(None)},
        "cast_samples": samples,
        "tensor_stats": stats,
        "comm": {dev: [{"earliest_ready_offset": 0, "duration": 1000, "bucket_bytes": 4096, "after_op": "a"}]
                 for dev in ("t0", "i0")},
        "devices": [
            {"id": "t0", "is_inference": False, "mem_capacity_bytes": 10 ** 9, "profile": "train"},
            {"id": "i0", "is_inference": True, "mem_capacity_bytes": cap, "profile": "infer"},
        ],
        "loss": {"kind": "ce_mean", "N": 16},
    }


def f2_bundle(cap=420):
    return bundle_from_dict(f2_bundle_dict(cap))
