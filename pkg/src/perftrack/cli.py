"""Command-line entry point.

Exit status: 0 on success, 1 on usage errors, 2 on data or model errors
(saturation, infeasible plan, malformed input).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .autoscaler import ScalingPolicy, run_closed_loop
from .ekf import MetricSample, NoiseConfig, TrackerConfig, track
from .model import ModelError, ParamVector, Topology, load_topology, response_breakdown
from .planner import Bounds, SlaSpec, max_supported_load, plan_capacity, whatif_response
from .sim import Scenario, ScenarioError, generate_analytic, run_des

log = logging.getLogger("perftrack")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _read_json(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as exc:
        raise UsageError(str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _write_jsonl(fh, doc: dict) -> None:
    fh.write(json.dumps(doc) + "\n")


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def read_metrics(path):
    """Yield MetricSamples from a metrics JSONL file, one line at a time."""
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield MetricSample.from_dict(json.loads(line))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad metrics record ({exc})") from exc


def load_estimate(path, topo: Topology) -> ParamVector:
    """Parameter snapshot from a JSON object or the last line of an estimates JSONL file.

    Accepts either ``{"x": [flat state]}`` or ``{"u0": .., "d": .., "S": ..}``.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(str(exc)) from exc
    try:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError:
            lines = [ln for ln in text.splitlines() if ln.strip()]
            if not lines:
                raise DataError(f"{path}: no estimate found")
            doc = json.loads(lines[-1])
        if "x" in doc:
            return ParamVector.from_flat(doc["x"], topo.num_tiers, topo.num_classes)
        return ParamVector.from_dict(doc)
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{path}: bad estimate ({exc})") from exc


def _topology(args) -> Topology:
    try:
        topo = load_topology(args.topology)
    except OSError as exc:
        raise UsageError(str(exc)) from exc
    except (KeyError, ValueError, TypeError) as exc:
        raise DataError(f"{args.topology}: bad topology ({exc})") from exc
    if getattr(args, "replicas", None):
        topo = topo.with_replicas(args.replicas)
    return topo


def _tracker_config(args, topo: Topology | None = None) -> TrackerConfig:
    x0 = None
    if args.x0:
        if topo is None:
            raise UsageError("--x0 needs a topology")
        x0 = load_estimate(args.x0, topo)
    noise = NoiseConfig(q_rel=args.q_rel, r_rel=args.r_rel)
    return TrackerConfig(x0=x0, p0_scale=args.p0_scale, noise=noise)


def _scenario(args) -> Scenario:
    doc = _read_json(args.scenario)
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        return Scenario.from_dict(doc)
    except (KeyError, TypeError) as exc:
        raise DataError(f"{args.scenario}: bad scenario ({exc})") from exc


# -- subcommands ------------------------------------------------------------


def cmd_simulate(args) -> int:
    s = _scenario(args)
    mode = args.mode or _read_json(args.scenario).get("mode", "analytic")
    samples, truth = (run_des if mode == "des" else generate_analytic)(s)
    with open(args.out_metrics, "w") as fm, open(args.out_truth, "w") as ft:
        for smp, tr in zip(samples, truth):
            _write_jsonl(fm, smp.to_dict())
            _write_jsonl(ft, tr.to_dict())
    log.info("wrote %d samples", len(samples))
    return EXIT_OK


def cmd_track(args) -> int:
    topo = _topology(args)
    cfg = _tracker_config(args, topo)
    n = 0
    with open(args.out, "w") as out:
        for rec in track(read_metrics(args.metrics), topo, cfg):
            _write_jsonl(out, rec.to_dict())
            n += 1
    log.info("tracked %d samples", n)
    return EXIT_OK


def cmd_whatif(args) -> int:
    topo = _topology(args)
    x = load_estimate(args.estimate, topo)
    _emit(whatif_response(x, args.lam, topo).to_dict(), args.out)
    return EXIT_OK


def cmd_breakdown(args) -> int:
    topo = _topology(args)
    x = load_estimate(args.estimate, topo)
    _emit(response_breakdown(x, args.lam, topo).to_dict(), args.out)
    return EXIT_OK


def _sla(args, num_classes: int) -> SlaSpec:
    if args.sla:
        return SlaSpec.from_dict(_read_json(args.sla))
    if not args.r_max:
        raise UsageError("give --sla or --r-max")
    r_max = args.r_max * num_classes if len(args.r_max) == 1 else args.r_max
    return SlaSpec(tuple(r_max), args.u_max)


def cmd_plan(args) -> int:
    topo = _topology(args)
    x = load_estimate(args.estimate, topo)
    M = topo.num_tiers
    lo = args.min_replicas or [1] * M
    hi = args.max_replicas or [10] * M
    lo = lo * M if len(lo) == 1 else lo
    hi = hi * M if len(hi) == 1 else hi
    plan = plan_capacity(x, args.lam, _sla(args, topo.num_classes), Bounds(lo, hi), topo)
    _emit(plan.to_dict(), args.out)
    return EXIT_OK if plan.feasible else EXIT_DATA


def cmd_maxload(args) -> int:
    topo = _topology(args)
    x = load_estimate(args.estimate, topo)
    alpha = max_supported_load(x, topo, _sla(args, topo.num_classes), args.lam)
    _emit({"scale": alpha, "lambda": (np.asarray(args.lam) * alpha).tolist()}, args.out)
    return EXIT_OK


def cmd_autoscale(args) -> int:
    s = _scenario(args)
    policy = ScalingPolicy.from_dict(_read_json(args.policy), s.topo.num_tiers)
    cfg = _tracker_config(args, s.topo)
    result = run_closed_loop(s, policy, cfg, warmup=args.warmup)
    with open(args.out_directives, "w") as f:
        for d in result.directives:
            _write_jsonl(f, d)
    summary = result.summary()
    if args.compare_static:
        static = Scenario.from_dict({**s.to_dict(), "topology": {
            **s.topo.to_dict(), "replicas": list(policy.bounds.lo)}})
        summary["static_violation_fraction"] = run_closed_loop(
            static, policy, cfg, static=True).violation_fraction
    _emit(summary, args.out_summary)
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def _add_filter_flags(p) -> None:
    p.add_argument("--x0", help="initial parameter snapshot (JSON)")
    p.add_argument("--p0-scale", type=float, default=TrackerConfig.p0_scale)
    p.add_argument("--q-rel", type=float, default=NoiseConfig.q_rel)
    p.add_argument("--r-rel", type=float, default=NoiseConfig.r_rel)


def _add_query_flags(p, sla: bool = False) -> None:
    p.add_argument("--topology", required=True)
    p.add_argument("--estimate", required=True, help="estimate snapshot (JSON or estimates JSONL)")
    p.add_argument("--lambda", dest="lam", type=_floats, required=True,
                   help="arrival rates per class, comma separated")
    p.add_argument("--replicas", type=_ints, help="override the topology's replica counts")
    p.add_argument("--out", help="write JSON here instead of stdout")
    if sla:
        p.add_argument("--sla", help="SLA document {r_max: [...], u_max: ...}")
        p.add_argument("--r-max", type=_floats, help="response ceilings (one value applies to all)")
        p.add_argument("--u-max", type=float, default=0.95)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="perftrack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("simulate", help="scenario -> metrics JSONL + truth JSONL")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out-metrics", required=True)
    p.add_argument("--out-truth", required=True)
    p.add_argument("--mode", choices=["analytic", "des"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", help="metrics JSONL -> estimates JSONL")
    p.add_argument("--topology", required=True)
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    _add_filter_flags(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("whatif", help="predicted observation for a hypothetical workload/topology")
    _add_query_flags(p)
    p.set_defaults(func=cmd_whatif)

    p = sub.add_parser("breakdown", help="per-class response-time decomposition")
    _add_query_flags(p)
    p.set_defaults(func=cmd_breakdown)

    p = sub.add_parser("plan", help="cheapest replica vector meeting an SLA")
    _add_query_flags(p, sla=True)
    p.add_argument("--min-replicas", type=_ints)
    p.add_argument("--max-replicas", type=_ints)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("maxload", help="largest workload scale along --lambda meeting an SLA")
    _add_query_flags(p, sla=True)
    p.set_defaults(func=cmd_maxload)

    p = sub.add_parser("autoscale", help="closed loop: simulator + tracker + autoscaler")
    p.add_argument("--scenario", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--out-directives", required=True)
    p.add_argument("--out-summary")
    p.add_argument("--warmup", type=int, default=0, help="windows before the first directive")
    p.add_argument("--compare-static", action="store_true",
                   help="also run the minimal static topology and report its violation fraction")
    p.add_argument("--seed", type=int)
    _add_filter_flags(p)
    p.set_defaults(func=cmd_autoscale)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"perftrack: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ModelError, ScenarioError, ValueError, KeyError) as exc:
        print(f"perftrack: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
