"""Profile bundles: loading, casting-cost linear models and tensor statistics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import jsonschema

from .errors import (
    BundleReferenceError,
    BundleSchemaError,
    DegenerateFitError,
    DomainError,
    MissingModelError,
    MissingProfileError,
    ValidationError,
)
from .graph import Precision, PrecisionDAG, dag_from_dict, dag_to_dict

SCHEMA_VERSION = 1
DEFAULT_WINDOW = 50
SCHEMES = ("float_to_float", "quantize_fixed", "dequantize_fixed")

STAT_FIELDS = (
    "norm_w_sq",
    "norm_act_sq",
    "norm_grad_act_sq",
    "D_act",
    "D_w",
    "D_grad",
    "q_act",
    "q_w",
    "e_act",
    "e_w",
    "e_grad",
)
OPTIONAL_STAT_FIELDS = ("norm_grad_act_hat_sq",)


def round_half_up(x) -> int:
    return int(math.floor(x + 0.5))


def cast_scheme(src: Precision, dst: Precision) -> str:
    if dst.is_fixed_point:
        return "quantize_fixed"
    if src.is_fixed_point:
        return "dequantize_fixed"
    return "float_to_float"


@dataclass(frozen=True)
class OpCost:
    pure_ns: int
    memory_bytes: int
    fwd_ns: int | None = None

    @property
    def fwd_share(self) -> int:
        # forward:backward defaults to 1:2 when the profile gives no split
        if self.fwd_ns is not None:
            return self.fwd_ns
        return round_half_up(Fraction(self.pure_ns, 3))

    @property
    def bwd_share(self) -> int:
        return self.pure_ns - self.fwd_share


@dataclass(frozen=True)
class OpCostProfile:
    entries: Mapping[tuple[str, Precision], OpCost]

    def get(self, op: str, p: Precision) -> OpCost:
        try:
            return self.entries[(op, p)]
        except KeyError:
            raise MissingProfileError(f"missing-profile: no cost entry for ({op}, {p.value})") from None

    def pure_cost(self, op: str, p: Precision) -> int:
        return self.get(op, p).pure_ns

    def memory(self, op: str, p: Precision) -> int:
        return self.get(op, p).memory_bytes


@dataclass(frozen=True)
class LinearCost:
    a: float
    b: float
    r2: float = 1.0

    def __call__(self, numel: int) -> int:
        return round_half_up(self.a * numel + self.b)


@dataclass(frozen=True)
class CastCostModel:
    models: Mapping[tuple[Precision, Precision, str], LinearCost]

    @classmethod
    def fit(cls, samples: Sequence["CastSample"]) -> "CastCostModel":
        grouped: dict[tuple, list[tuple[int, float]]] = {}
        for s in samples:
            grouped.setdefault((s.src, s.dst, s.scheme), []).append((s.numel, s.measured_ns))
        models = {}
        for key in sorted(grouped, key=lambda k: (k[0].bit_width, k[1].bit_width, k[2])):
            a, b, r2 = fit_cast_model(grouped[key])
            models[key] = LinearCost(a, b, r2)
        return cls(models)


def predict_cast_cost(model: CastCostModel, src: Precision, dst: Precision, numel: int) -> int:
    if numel < 0:
        raise DomainError(f"numel must be nonnegative, got {numel}")
    if src is dst:
        return 0
    key = (src, dst, cast_scheme(src, dst))
    try:
        lin = model.models[key]
    except KeyError:
        raise MissingModelError(f"missing-model: no cast model for {src.value}->{dst.value} ({key[2]})") from None
    return lin(numel)


def fit_cast_model(samples: Sequence[tuple[int, float]]) -> tuple[float, float, float]:
    """Ordinary least squares ``cost = a * numel + b``, both clamped to >= 0.

    Sums are accumulated exactly with :class:`fractions.Fraction` so noiseless
    inputs give the exact line back. Returns ``(a, b, r2)``.
    """
    if len(samples) < 2:
        raise DegenerateFitError("need at least 2 samples")
    xs = [Fraction(int(x)) for x, _ in samples]
    ys = [Fraction(float(y)) for _, y in samples]
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxx = sum((x - mx) ** 2 for x in xs)
    if sxx == 0:
        raise DegenerateFitError("all samples share one numel; slope is undetermined")
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    a = sxy / sxx
    b = my - a * mx
    if a < 0:
        a, b = Fraction(0), my
    if b < 0:
        # refit through the origin
        a, b = max(Fraction(0), sum(x * y for x, y in zip(xs, ys)) / sum(x * x for x in xs)), Fraction(0)
    ss_tot = sum((y - my) ** 2 for y in ys)
    ss_res = sum((y - (a * x + b)) ** 2 for x, y in zip(xs, ys))
    r2 = 1.0 if ss_tot == 0 else float(1 - ss_res / ss_tot)
    return float(a), float(b), r2


TensorStats = Mapping[str, Mapping[str, float]]


def reduce_stats(per_iteration: Sequence[TensorStats], window: int = DEFAULT_WINDOW) -> dict[str, dict[str, float]]:
    """Mean of every per-operator field over the leading ``window`` snapshots."""
    if not per_iteration:
        raise DomainError("no tensor-stat snapshots to reduce")
    if window < 1:
        raise DomainError("window must be >= 1")
    head = per_iteration[:window]
    sums: dict[str, dict[str, float]] = {}
    counts: dict[str, dict[str, int]] = {}
    for snap in head:
        for op, fields in snap.items():
            acc = sums.setdefault(op, {})
            cnt = counts.setdefault(op, {})
            for k, v in fields.items():
                acc[k] = acc.get(k, 0.0) + float(v)
                cnt[k] = cnt.get(k, 0) + 1
    return {op: {k: acc[k] / counts[op][k] for k in acc} for op, acc in sums.items()}


@dataclass(frozen=True)
class CastSample:
    src: Precision
    dst: Precision
    scheme: str
    numel: int
    measured_ns: float


@dataclass(frozen=True)
class CommSlot:
    earliest_ready_offset: int
    duration: int
    bucket_bytes: int
    after_op: str | None = None


@dataclass(frozen=True)
class DeviceSpec:
    id: str
    is_inference: bool
    mem_capacity_bytes: int
    profile: str
    optimizer_ns: int = 0


@dataclass(frozen=True)
class LossSpec:
    kind: str = "generic_negone"
    N: int = 1

    def __post_init__(self):
        if self.kind not in ("mse_mean", "ce_mean", "generic_negone"):
            raise ValidationError(f"unknown loss kind {self.kind}")
        if self.N < 1:
            raise ValidationError("loss N must be >= 1")

    @property
    def gamma(self) -> float:
        if self.kind == "mse_mean":
            return 2.0 / self.N
        if self.kind == "ce_mean":
            return 1.0 / self.N
        return -1.0


@dataclass(frozen=True, eq=False)
class ProfileBundle:
    graph: PrecisionDAG
    op_costs: Mapping[str, OpCostProfile]
    cast_samples: tuple[CastSample, ...]
    tensor_stats: tuple[TensorStats, ...]
    comm: Mapping[str, tuple[CommSlot, ...]]
    devices: tuple[DeviceSpec, ...]
    loss: LossSpec = field(default_factory=LossSpec)
    cast_keys: tuple[tuple[Precision, Precision, str], ...] = ()

    def __eq__(self, other):
        if not isinstance(other, ProfileBundle):
            return NotImplemented
        return bundle_to_dict(self) == bundle_to_dict(other)

    def device(self, dev: str) -> DeviceSpec:
        for d in self.devices:
            if d.id == dev:
                return d
        raise BundleReferenceError(f"unknown device {dev}")

    def costs_for(self, dev: str) -> OpCostProfile:
        return self.op_costs[self.device(dev).profile]

    def cast_model(self) -> CastCostModel:
        return CastCostModel.fit(self.cast_samples)

    def stats(self, window: int = DEFAULT_WINDOW) -> dict[str, dict[str, float]]:
        return reduce_stats(self.tensor_stats, window)

    @property
    def inference_devices(self) -> list[str]:
        return [d.id for d in self.devices if d.is_inference]


_PREC = {"enum": ["INT8", "FP16", "FP32"]}
_NONNEG_INT = {"type": "integer", "minimum": 0}

BUNDLE_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "graph", "op_costs", "cast_samples", "tensor_stats", "comm", "devices"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "graph": {
            "type": "object",
            "required": ["nodes", "edges"],
            "properties": {
                "nodes": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["id", "kind", "output_numel", "supported_precisions"],
                        "properties": {
                            "id": {"type": "string", "minLength": 1},
                            "kind": {"enum": ["adjustable", "dependent", "fixed"]},
                            "has_weight": {"type": "boolean"},
                            "weight_numel": _NONNEG_INT,
                            "output_numel": _NONNEG_INT,
                            "subgraph_id": {"type": "string"},
                            "supported_precisions": {"type": "array", "minItems": 1, "items": _PREC},
                        },
                    },
                },
                "edges": {
                    "type": "array",
                    "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "string"}},
                },
                "assignment": {"type": "object", "additionalProperties": _PREC},
            },
        },
        "op_costs": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["op", "precision", "pure_ns", "memory_bytes"],
                    "properties": {
                        "op": {"type": "string"},
                        "precision": _PREC,
                        "pure_ns": {"type": "integer", "minimum": 1},
                        "memory_bytes": _NONNEG_INT,
                        "fwd_ns": _NONNEG_INT,
                    },
                },
            },
        },
        "cast_samples": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["src", "dst", "scheme", "numel", "measured_ns"],
                "properties": {
                    "src": _PREC,
                    "dst": _PREC,
                    "scheme": {"enum": list(SCHEMES)},
                    "numel": _NONNEG_INT,
                    "measured_ns": {"type": "number", "minimum": 0},
                },
            },
        },
        "cast_keys": {
            "type": "array",
            "items": {"type": "array", "minItems": 3, "maxItems": 3},
        },
        "tensor_stats": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "object", "additionalProperties": {"type": "object"}},
        },
        "comm": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["earliest_ready_offset", "duration", "bucket_bytes"],
                    "properties": {
                        "earliest_ready_offset": _NONNEG_INT,
                        "duration": {"type": "integer", "minimum": 1},
                        "bucket_bytes": _NONNEG_INT,
                        "after_op": {"type": "string"},
                    },
                },
            },
        },
        "devices": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "is_inference", "mem_capacity_bytes"],
                "properties": {
                    "id": {"type": "string"},
                    "is_inference": {"type": "boolean"},
                    "mem_capacity_bytes": _NONNEG_INT,
                    "profile": {"type": "string"},
                    "optimizer_ns": _NONNEG_INT,
                },
            },
        },
        "loss": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["mse_mean", "ce_mean", "generic_negone"]},
                "N": {"type": "integer", "minimum": 1},
            },
        },
    },
}


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def bundle_from_dict(data: Mapping) -> ProfileBundle:
    validator = jsonschema.Draft202012Validator(BUNDLE_SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        raise BundleSchemaError(_pointer(err.absolute_path), err.message)

    dag = dag_from_dict(data["graph"])
    op_ids = set(dag.nodes)

    devices = tuple(
        DeviceSpec(
            id=d["id"],
            is_inference=d["is_inference"],
            mem_capacity_bytes=d["mem_capacity_bytes"],
            profile=d.get("profile", d["id"]),
            optimizer_ns=d.get("optimizer_ns", 0),
        )
        for d in data["devices"]
    )
    if len({d.id for d in devices}) != len(devices):
        raise ValidationError("duplicate device id")

    op_costs = {}
    for name, rows in data["op_costs"].items():
        entries = {}
        for i, row in enumerate(rows):
            if row["op"] not in op_ids:
                raise BundleReferenceError(f"/op_costs/{name}/{i}: unknown operator {row['op']}")
            p = Precision(row["precision"])
            fwd = row.get("fwd_ns")
            if fwd is not None and fwd > row["pure_ns"]:
                raise ValidationError(f"/op_costs/{name}/{i}: fwd_ns exceeds pure_ns")
            entries[(row["op"], p)] = OpCost(row["pure_ns"], row["memory_bytes"], fwd)
        for op, node in dag.nodes.items():
            for p in node.supported_precisions:
                if (op, p) not in entries:
                    raise ValidationError(f"/op_costs/{name}: missing entry for ({op}, {p.value})")
        op_costs[name] = OpCostProfile(entries)
    for d in devices:
        if d.profile not in op_costs:
            raise BundleReferenceError(f"device {d.id} references unknown cost profile {d.profile}")

    samples = tuple(
        CastSample(Precision(s["src"]), Precision(s["dst"]), s["scheme"], s["numel"], s["measured_ns"])
        for s in data["cast_samples"]
    )
    for i, s in enumerate(samples):
        if s.scheme != cast_scheme(s.src, s.dst) or s.src is s.dst:
            raise ValidationError(f"/cast_samples/{i}: scheme {s.scheme} does not match {s.src.value}->{s.dst.value}")
    cast_keys = tuple((Precision(k[0]), Precision(k[1]), str(k[2])) for k in data.get("cast_keys", []))
    counts: dict[tuple, set] = {}
    for s in samples:
        counts.setdefault((s.src, s.dst, s.scheme), set()).add(s.numel)
    for key in set(cast_keys) | set(counts):
        if len(counts.get(key, ())) < 2:
            raise ValidationError(
                f"cast key {key[0].value}->{key[1].value} ({key[2]}) needs samples at >= 2 distinct numel"
            )

    stats = tuple(data["tensor_stats"])
    for i, snap in enumerate(stats):
        for op in snap:
            if op not in op_ids:
                raise BundleReferenceError(f"/tensor_stats/{i}: unknown operator {op}")

    comm = {}
    for dev, slots in data["comm"].items():
        if dev not in {d.id for d in devices}:
            raise BundleReferenceError(f"/comm: unknown device {dev}")
        parsed = []
        for j, s in enumerate(slots):
            if s.get("after_op") is not None and s["after_op"] not in op_ids:
                raise BundleReferenceError(f"/comm/{dev}/{j}: unknown operator {s['after_op']}")
            parsed.append(CommSlot(s["earliest_ready_offset"], s["duration"], s["bucket_bytes"], s.get("after_op")))
        comm[dev] = tuple(parsed)
    for d in devices:
        comm.setdefault(d.id, ())
    if len({len(v) for v in comm.values()}) > 1:
        raise ValidationError("all devices must report the same number of communication slots")

    loss = LossSpec(**data["loss"]) if "loss" in data else LossSpec()

    return ProfileBundle(
        graph=dag,
        op_costs=op_costs,
        cast_samples=samples,
        tensor_stats=stats,
        comm=comm,
        devices=devices,
        loss=loss,
        cast_keys=cast_keys,
    )


def load_profile(path) -> ProfileBundle:
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise BundleSchemaError("", f"malformed JSON: {e}") from None
    return bundle_from_dict(data)


def bundle_to_dict(bundle: ProfileBundle) -> dict:
    op_costs = {}
    for name, prof in bundle.op_costs.items():
        rows = []
        for (op, p), c in prof.entries.items():
            row = {"op": op, "precision": p.value, "pure_ns": c.pure_ns, "memory_bytes": c.memory_bytes}
            if c.fwd_ns is not None:
                row["fwd_ns"] = c.fwd_ns
            rows.append(row)
        op_costs[name] = rows
    comm = {}
    for dev, slots in bundle.comm.items():
        out = []
        for s in slots:
            row = {"earliest_ready_offset": s.earliest_ready_offset, "duration": s.duration, "bucket_bytes": s.bucket_bytes}
            if s.after_op is not None:
                row["after_op"] = s.after_op
            out.append(row)
        comm[dev] = out
    data = {
        "schema_version": SCHEMA_VERSION,
        "graph": dag_to_dict(bundle.graph),
        "op_costs": op_costs,
        "cast_samples": [
            {"src": s.src.value, "dst": s.dst.value, "scheme": s.scheme, "numel": s.numel, "measured_ns": s.measured_ns}
            for s in bundle.cast_samples
        ],
        "tensor_stats": [dict(s) for s in bundle.tensor_stats],
        "comm": comm,
        "devices": [
            {
                "id": d.id,
                "is_inference": d.is_inference,
                "mem_capacity_bytes": d.mem_capacity_bytes,
                "profile": d.profile,
                "optimizer_ns": d.optimizer_ns,
            }
            for d in bundle.devices
        ],
        "loss": {"kind": bundle.loss.kind, "N": bundle.loss.N},
    }
    if bundle.cast_keys:
        data["cast_keys"] = [[k[0].value, k[1].value, k[2]] for k in bundle.cast_keys]
    return data


def save_profile(bundle: ProfileBundle, path) -> None:
    with open(path, "w") as f:
        json.dump(bundle_to_dict(bundle), f, indent=2, sort_keys=True)
        f.write("\n")
