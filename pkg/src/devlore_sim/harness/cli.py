"""Command-line entry point."""

import argparse
import json
import sys

from ..events import StepLimitExceeded
from ..hypervisor import STRATEGIES
from ..trace import load_trace
from . import config as cfgmod
from .engine import EXIT_USAGE, compare, replay, run

ATTACK_SCENARIOS = [
    ("counter-fake", "InjectFake", "event counter bumped by a forged interrupt"),
    ("reorder", "ReorderBeyondWindow", "low-priority interrupts injected ahead of urgent ones"),
    ("drop", "DropAndMiscount", "most urgent pending interrupt withheld"),
    ("replay", "ReplayConsumed", "already-delivered interrupt injected again"),
    ("storm", "PrematureLevelAck", "level interrupt acknowledged before the driver drains it"),
    ("gic-tamper", "GicTamper", "protected interrupt disabled through GIC configuration"),
    ("stall", "StallScheduling", "VM entry delayed, stale request submitted"),
    ("wrong-pa", "WrongPaMapping", "device GPA backed by another device's registers"),
]


def _parser():
    ap = argparse.ArgumentParser(prog="devlore-sim", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("scenario")
    r.add_argument("--mode", choices=["bn", "br", "dmi"])
    r.add_argument("--strategy", metavar="NAME[:PARAM]")
    r.add_argument("--seed", type=int)
    r.add_argument("--trace", metavar="PATH")
    r.add_argument("--metrics", metavar="PATH")

    c = sub.add_parser("compare", help="compare metrics of two scenarios")
    c.add_argument("file_a")
    c.add_argument("file_b")

    p = sub.add_parser("replay", help="re-run a scenario and byte-compare its trace")
    p.add_argument("trace")
    p.add_argument("scenario")

    sub.add_parser("attacks", help="list built-in attack scenarios")
    return ap


def _header_overrides(trace_path):
    """Mode, strategy and seed recorded in a trace's scenario header."""
    with open(trace_path) as fh:
        first = fh.readline()
    rec = json.loads(first) if first.strip() else {}
    if rec.get("kind") != "scenario":
        return {}
    return {"mode": rec.get("mode"), "strategy": rec.get("strategy"), "seed": rec.get("seed")}


def main(argv=None):
    ap = _parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else 0
    try:
        return _dispatch(args)
    except (cfgmod.ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StepLimitExceeded as exc:
        print(f"error: step limit exceeded ({exc})", file=sys.stderr)
        return EXIT_USAGE


def _dispatch(args):
    if args.cmd == "attacks":
        for name, strategy, what in ATTACK_SCENARIOS:
            print(f"{name:12s} {strategy:20s} {what}")
        print()
        print("strategies: " + ", ".join(
            s if d is None else f"{s}[:{d}]" for s, (d, _) in STRATEGIES.items()))
        return 0

    if args.cmd == "run":
        cfg = cfgmod.load(args.scenario).with_overrides(args.mode, args.strategy, args.seed)
        result = run(cfg)
        if args.trace:
            result.trace.dump(args.trace)
        if args.metrics:
            with open(args.metrics, "w") as fh:
                json.dump(result.summary(), fh, indent=2)
        print(json.dumps({"status": result.status_name, "violations": result.violations,
                          "corruption": result.corruption,
                          "metrics": result.metrics.as_dict()}, indent=2))
        return result.status

    if args.cmd == "compare":
        report = compare(cfgmod.load(args.file_a), cfgmod.load(args.file_b))
        print(json.dumps(report, indent=2))
        return 0

    if args.cmd == "replay":
        try:
            load_trace(args.trace)
            overrides = _header_overrides(args.trace)
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"unreadable trace {args.trace}: {exc}") from None
        cfg = cfgmod.load(args.scenario).with_overrides(**overrides)
        with open(args.trace) as fh:
            verdict = replay(fh.readlines(), cfg)
        print(json.dumps(verdict))
        return 0 if verdict["verdict"] == "identical" else EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
