"""qsync-planner command line."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field

from .allocator import DEFAULT_MAX_OPS, AllocProblem, plan_from_json, plan_to_json, solve
from .errors import InvariantError, PlannerError, ValidationError
from .indicator import score_all
from .profile import DEFAULT_WINDOW, LossSpec, fit_cast_model, load_profile
from .replay import Cluster, export_trace, throughput

log = logging.getLogger("qsync_planner")


@dataclass
class Config:
    bundle_path: str
    loss_kind: str | None = None
    loss_n: int | None = None
    window: int = DEFAULT_WINDOW
    mem_caps: dict[str, int] = field(default_factory=dict)
    t_min: float | None = None
    max_ops: int = DEFAULT_MAX_OPS
    out: str | None = None
    trace_out: str | None = None
    plan_path: str | None = None
    seed: int = 0
    literal_t_min: bool = False

    def __post_init__(self):
        if not self.bundle_path:
            raise ValidationError("bundle path must be nonempty")
        if self.window < 1:
            raise ValidationError("--window must be >= 1")
        if not 1 <= self.max_ops <= 12:
            raise ValidationError("--max-ops must be within [1, 12]")

    def loss(self, bundle) -> LossSpec:
        if self.loss_kind is None and self.loss_n is None:
            return bundle.loss
        return LossSpec(self.loss_kind or bundle.loss.kind, self.loss_n or bundle.loss.N)


def _dump(obj, path=None):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as f:
            f.write(text)


def cmd_indicate(cfg: Config) -> int:
    bundle = load_profile(cfg.bundle_path)
    scores = score_all(bundle.graph, bundle.stats(cfg.window), cfg.loss(bundle))
    _dump(scores.rows(), cfg.out)
    return 0


def cmd_replay(cfg: Config) -> int:
    bundle = load_profile(cfg.bundle_path)
    with open(cfg.plan_path) as f:
        try:
            plan = plan_from_json(json.load(f))
        except json.JSONDecodeError as e:
            raise ValidationError(f"malformed plan file: {e}") from None
    cluster = Cluster(bundle)
    timeline, memory = cluster.evaluate(plan)
    report = {
        "makespan_ns": timeline.makespan,
        "throughput_it_s": throughput(timeline),
        "memory_bytes": memory,
        "sync_wait_ns": {dev: timeline.sync_wait(dev) for dev in cluster.devices},
    }
    _dump(report, cfg.out)
    if cfg.trace_out:
        export_trace(timeline, cfg.trace_out)
    return 0


def cmd_plan(cfg: Config) -> int:
    bundle = load_profile(cfg.bundle_path)
    problem = AllocProblem.from_bundle(
        bundle,
        loss=cfg.loss(bundle),
        mem_caps=cfg.mem_caps,
        window=cfg.window,
        t_min=cfg.t_min,
        max_ops=cfg.max_ops,
        literal_t_min=cfg.literal_t_min,
    )
    plan, timeline, report = solve(problem)
    _dump(plan_to_json(plan, report), cfg.out)
    if cfg.trace_out:
        export_trace(timeline, cfg.trace_out)
    print(
        f"omega {report['total_omega_initial']:.6g}→{report['total_omega']:.6g} "
        f"throughput {report['predicted_throughput_it_s']:.6g} it/s",
        file=sys.stderr if cfg.out in (None, "-") else sys.stdout,
    )
    return 0


def cmd_fit_cast(cfg: Config) -> int:
    bundle = load_profile(cfg.bundle_path)
    grouped = {}
    for s in bundle.cast_samples:
        grouped.setdefault((s.src.value, s.dst.value, s.scheme), []).append((s.numel, s.measured_ns))
    rows = []
    for (src, dst, scheme), samples in sorted(grouped.items()):
        a, b, r2 = fit_cast_model(samples)
        rows.append({"src": src, "dst": dst, "scheme": scheme, "a_ns_per_elem": a, "b_ns": b, "r2": r2, "n": len(samples)})
    _dump(rows, cfg.out)
    return 0


def _mem_cap(text):
    dev, sep, val = text.partition("=")
    if not sep or not dev:
        raise argparse.ArgumentTypeError(f"expected dev=bytes, got {text!r}")
    try:
        return dev, int(val)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bytes must be an integer in {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qsync-planner",
        description="Plan per-operator precisions for inference GPUs in hybrid data-parallel training.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output file (default: stdout)"):
        p.add_argument("--bundle", required=True, help="profile bundle JSON")
        p.add_argument("--out", help=out_help)
        p.add_argument("--loss", choices=["mse_mean", "ce_mean", "generic_negone"], help="override the bundle's loss kind")
        p.add_argument("--loss-n", type=int, help="batch denominator N for mean losses")
        p.add_argument("--window", type=int, default=DEFAULT_WINDOW, help="profiling iterations to average (default 50)")
        p.add_argument("--seed", type=int, default=0, help="seed for randomized routines (env QSYNC_SEED overrides)")

    p = sub.add_parser("indicate", help="write the perturbation score table")
    common(p)
    p.set_defaults(func=cmd_indicate)

    p = sub.add_parser("replay", help="simulate a plan and report makespan, throughput and memory")
    common(p)
    p.add_argument("--plan", required=True, help="plan JSON produced by `plan`")
    p.add_argument("--trace-out", help="write a Chrome trace-event JSON")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("plan", help="solve for a precision plan")
    common(p, "plan JSON output (default: stdout)")
    p.add_argument("--mem-cap", type=_mem_cap, action="append", default=[], metavar="DEV=BYTES", help="memory cap override")
    p.add_argument("--t-min", type=float, help="throughput floor in it/s (default: initial plan throughput)")
    p.add_argument(
        "--literal-t-min",
        action="store_true",
        help="use the uniform-lowest-precision plan's throughput as the floor",
    )
    p.add_argument("--max-ops", type=int, default=DEFAULT_MAX_OPS, help="adjustable ops enumerated per subgraph (1-12)")
    p.add_argument("--trace-out", help="write a Chrome trace-event JSON of the solved plan")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("fit-cast", help="fit and print casting-cost linear models")
    common(p)
    p.set_defaults(func=cmd_fit_cast)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    seed = int(os.environ.get("QSYNC_SEED", args.seed))
    try:
        cfg = Config(
            bundle_path=args.bundle,
            loss_kind=args.loss,
            loss_n=args.loss_n,
            window=args.window,
            mem_caps=dict(getattr(args, "mem_cap", [])),
            t_min=getattr(args, "t_min", None),
            max_ops=getattr(args, "max_ops", DEFAULT_MAX_OPS),
            out=args.out,
            trace_out=getattr(args, "trace_out", None),
            plan_path=getattr(args, "plan", None),
            seed=seed,
            literal_t_min=getattr(args, "literal_t_min", False),
        )
        return args.func(cfg)
    except PlannerError as e:
        print(str(e), file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return 2
    except AssertionError as e:
        print(str(InvariantError(str(e))), file=sys.stderr)
        return InvariantError.exit_code


if __name__ == "__main__":
    sys.exit(main())
