"""Perturbation indicator: per-operator gradient-variance increment under
low-precision kernels, and stochastic-rounding simulators used to check it."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, StatsIncompleteError
from .graph import OperatorKind, OperatorNode, Precision, PrecisionDAG
from .profile import LossSpec

FP16_MANTISSA_BITS = 9


def fixed_point_tensor_variance(q: float, D: float) -> float:
    if q <= 0:
        raise DomainError(f"scaling factor must be positive, got {q}")
    if D < 0:
        raise DomainError("element count must be nonnegative")
    return q * q * D / 6.0


def float_tensor_variance(e: float, k: int, D: float) -> float:
    if k < 1:
        raise DomainError("mantissa bits k must be >= 1")
    if D < 0:
        raise DomainError("element count must be nonnegative")
    return 2.0 ** (2 * e - 2 * k) * D / 6.0


class _Fields:
    def __init__(self, stats, op):
        self._stats = stats
        self._op = op

    def __getitem__(self, name):
        try:
            return float(self._stats[name])
        except (KeyError, TypeError):
            if name == "norm_grad_act_hat_sq":
                return self["norm_grad_act_sq"]
            raise StatsIncompleteError(self._op, name) from None

    def get(self, name, default):
        return float(self._stats.get(name, default))


def sigma_fwd(stats: Mapping[str, float], p: Precision, k: int = FP16_MANTISSA_BITS, op: str = "?") -> float:
    if p is Precision.FP32:
        return 0.0
    s = _Fields(stats, op)
    # parameter-free operators may omit weight statistics entirely
    has_w = s.get("D_w", 0.0) > 0
    if p is Precision.INT8:
        act = s["norm_w_sq"] * fixed_point_tensor_variance(s["q_act"], s["D_act"])
        wgt = s["norm_act_sq"] * fixed_point_tensor_variance(s["q_w"], s["D_w"]) if has_w else 0.0
    else:
        act = s["norm_w_sq"] * float_tensor_variance(s["e_act"], k, s["D_act"])
        wgt = s["norm_act_sq"] * float_tensor_variance(s["e_w"], k, s["D_w"]) if has_w else 0.0
    return act + wgt


def sigma_bwd(
    stats: Mapping[str, float],
    p: Precision,
    k: int = FP16_MANTISSA_BITS,
    op: str = "?",
    has_weight: bool = True,
) -> float:
    if p is Precision.FP32 or not has_weight:
        return 0.0
    s = _Fields(stats, op)
    if p is Precision.INT8:
        # fixed-point kernels run their backward pass in FP16
        return s["norm_grad_act_sq"] * fixed_point_tensor_variance(s["q_act"], s["D_act"]) + s[
            "norm_act_sq"
        ] * float_tensor_variance(s["e_grad"], k, s["D_grad"])
    return s["norm_grad_act_hat_sq"] * float_tensor_variance(s["e_act"], k, s["D_act"]) + s[
        "norm_act_sq"
    ] * float_tensor_variance(s["e_grad"], k, s["D_grad"])


def combine(gamma: float, depth: int, model_depth: int, s_fwd: float, s_bwd: float) -> float:
    return gamma * gamma * depth * s_fwd + (model_depth - depth) * s_bwd


def omega(
    node: OperatorNode,
    p: Precision,
    d_L: int,
    loss: LossSpec,
    stats: Mapping[str, float],
    k: int = FP16_MANTISSA_BITS,
) -> float:
    if p is Precision.FP32:
        return 0.0
    if node.kind is not OperatorKind.ADJUSTABLE:
        return 0.0
    s_fwd = sigma_fwd(stats, p, k, op=node.id)
    s_bwd = sigma_bwd(stats, p, k, op=node.id, has_weight=node.has_weight)
    return combine(loss.gamma, node.depth, d_L, s_fwd, s_bwd)


@dataclass(frozen=True)
class ScoreEntry:
    op: str
    precision: Precision
    omega: float
    delta_to_next: float | None


class PerturbationScore:
    """Omega lookup table. Operators that are not adjustable score zero."""

    def __init__(self, entries: Mapping[tuple[str, Precision], ScoreEntry]):
        self.entries = dict(entries)

    def omega(self, op: str, p: Precision) -> float:
        e = self.entries.get((op, p))
        return 0.0 if e is None else e.omega

    def delta(self, op: str, p: Precision) -> float | None:
        e = self.entries.get((op, p))
        return None if e is None else e.delta_to_next

    def total(self, assignment: Mapping[str, Precision]) -> float:
        return math.fsum(self.omega(op, p) for op, p in assignment.items())

    def rows(self) -> list[dict]:
        out = []
        for (op, p), e in sorted(self.entries.items(), key=lambda kv: (kv[0][0], kv[0][1].bit_width)):
            out.append({"op": op, "precision": p.value, "omega": e.omega, "delta_to_next": e.delta_to_next})
        return out


def score_all(
    dag: PrecisionDAG,
    stats: Mapping[str, Mapping[str, float]],
    loss: LossSpec,
    k: int = FP16_MANTISSA_BITS,
) -> PerturbationScore:
    entries = {}
    for op in dag.adjustable():
        node = dag.nodes[op]
        needs_stats = any(p is not Precision.FP32 for p in node.supported_precisions)
        if needs_stats and op not in stats:
            raise StatsIncompleteError(op)
        values = {p: omega(node, p, dag.model_depth, loss, stats.get(op, {}), k) for p in node.supported_precisions}
        for p, val in values.items():
            nxt = node.higher_supported(p)
            delta = None if nxt is None else val - values[nxt]
            entries[(op, p)] = ScoreEntry(op, p, val, delta)
    return PerturbationScore(entries)


def stochastic_round(
    values: Sequence[float],
    q: float,
    zp: float = 0.0,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Fixed-point stochastic rounding.

    Returns the rounded integer grid values and their dequantized reals.
    """
    if q <= 0:
        raise DomainError(f"scaling factor must be positive, got {q}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    scaled = (np.asarray(values, dtype=np.float64) - zp) / q
    low = np.floor(scaled)
    up = rng.random(scaled.shape) < (scaled - low)
    rounded = (low + up).astype(np.int64)
    return rounded, rounded * q + zp


def float_stochastic_round(
    values: Sequence[float],
    k: int = FP16_MANTISSA_BITS,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Keep ``k`` mantissa bits, rounding the dropped residual stochastically.

    Exponent range is not clipped; only mantissa precision is simulated.
    """
    if k < 1:
        raise DomainError("mantissa bits k must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(seed)
    x = np.asarray(values, dtype=np.float64)
    mag = np.abs(x)
    nonzero = mag > 0
    exp = np.zeros_like(mag)
    exp[nonzero] = np.floor(np.log2(mag[nonzero]))
    ulp = np.ldexp(1.0, (exp - k).astype(np.int64))
    low = np.floor(mag / ulp) * ulp
    up = rng.random(x.shape) < (mag - low) / ulp
    return np.sign(x) * (low + up * ulp)
