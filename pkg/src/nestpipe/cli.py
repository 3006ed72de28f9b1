"""``nestpipe`` command-line tool."""
from __future__ import annotations

import argparse
import os
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import schedule as sched
from .comm import deadlock_check, insert_comm_ops
from .config import ENV_VAR, ConfigError, RunConfig, load_config
from .dependencies import check_completeness, verify_dependencies
from .executor import execute_numeric, make_workload, max_grad_diff, sequential_reference
from .memory import closed_form_peak, profile_memory
from .nesting import Strategy, build_strategy, verify_order_property
from .render import TraceParseError, render_file
from .report import compare_strategies
from .schedule import ScheduleError, generate_llm_schedule
from .simulator import SimulationStall, bubble_rate, simulate, write_text_trace, write_trace

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SCHEDULE = 3
EXIT_DEADLOCK = 4
EXIT_STALL = 5


class CommandFailed(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _fmt(x) -> str:
    return f"{float(x):.6g}"


def _build(run: RunConfig, name: str) -> sched.Schedule:
    if name == "llm":
        return generate_llm_schedule(run.pipeline)
    return build_strategy(name, run.pipeline, run.placement)


def _strategies(run: RunConfig, args) -> list[str]:
    if getattr(args, "strategy", None):
        return [args.strategy]
    return [s.value for s in run.strategies]


def _out_dir(run: RunConfig, args) -> Path:
    path = Path(args.out) if args.out else Path(run.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_schedule(run: RunConfig, args) -> int:
    name = args.strategy or run.strategies[0].value
    schedule = _build(run, name)
    if args.comm:
        schedule = insert_comm_ops(schedule, run.cost.sizes)
    text = sched.dumps(schedule)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    counts = Counter(op.kind.value for op in schedule.ops())
    stream = sys.stderr if not args.out else sys.stdout
    if args.format == "csv":
        print("kind,count", file=stream)
        for kind in sched.OperatorKind:
            if counts[kind.value]:
                print(f"{kind.value},{counts[kind.value]}", file=stream)
    else:
        summary = " ".join(f"{k.value}={counts[k.value]}" for k in sched.OperatorKind if counts[k.value])
        print(f"{name}: {summary}", file=stream)
    return EXIT_OK


def cmd_simulate(run: RunConfig, args) -> int:
    out = _out_dir(run, args)
    rows = []
    for name in _strategies(run, args):
        timeline = simulate(_build(run, name), run.cost, rendezvous=run.rendezvous)
        write_trace(timeline, out / f"{name}.trace.jsonl")
        write_text_trace(timeline, out / f"{name}.trace.txt")
        bubbles = [_fmt(bubble_rate(timeline, r)) if timeline.intervals[r] else "nan" for r in range(run.pipeline.P)]
        peaks = ["nan"] * run.pipeline.P
        analytic = ["nan"] * run.pipeline.P
        if name != "llm":
            profile = profile_memory(timeline, run.footprint)
            (out / f"{name}.memory.csv").write_text(profile.to_csv())
            peaks = [_fmt(p) for p in profile.peak_bytes]
            analytic = [_fmt(p) for p in closed_form_peak(name, run.pipeline, run.footprint, run.placement)]
        rows.append((name, timeline.iteration_time, bubbles, peaks, analytic))
    if args.format == "csv":
        print("strategy,rank,iteration_time,bubble_rate,peak_memory,closed_form_peak")
        for name, t, bubbles, peaks, analytic in rows:
            for r in range(run.pipeline.P):
                print(f"{name},{r},{_fmt(t)},{bubbles[r]},{peaks[r]},{analytic[r]}")
    else:
        for name, t, bubbles, peaks, analytic in rows:
            print(f"{name}: iteration_time={_fmt(t)}")
            print(f"  bubble_rate per rank: {' '.join(bubbles)}")
            print(f"  peak memory per rank: {' '.join(peaks)}")
            print(f"  closed-form peak:     {' '.join(analytic)}")
        print(f"traces written to {out}")
    return EXIT_OK


def cmd_verify(run: RunConfig, args) -> int:
    if args.schedule:
        try:
            targets = [(args.schedule, sched.loads(Path(args.schedule).read_text()))]
        except OSError as exc:
            raise CommandFailed(EXIT_CONFIG, f"cannot read {args.schedule}: {exc.strerror}")
    else:
        targets = [(name, _build(run, name)) for name in _strategies(run, args)]
    code = EXIT_OK
    for name, schedule in targets:
        compute = schedule.compute_only()
        violations = verify_dependencies(compute)
        missing = check_completeness(compute)
        print(f"{name}: dependencies {'ok' if not violations and not missing else 'FAIL'}")
        for v in violations[:5]:
            print(f"  {v}")
        for m in missing[:5]:
            print(f"  {m}")
        if violations or missing:
            code = max(code, EXIT_SCHEDULE)
            continue
        if schedule.strategy == Strategy.BigMac.value:
            results = verify_order_property(schedule)
            bad = [r for r in results if not r.ok]
            print(f"  order property: {'ok' if not bad else 'FAIL'} ({len(results)} units checked)")
            if bad:
                print(f"  first violation: unit {bad[0].unit}: {bad[0].detail}")
                code = max(code, EXIT_SCHEDULE)
        with_comm = schedule if schedule.has_comm else insert_comm_ops(schedule, run.cost.sizes)
        result = deadlock_check(with_comm, rendezvous=run.rendezvous)
        mode = "rendezvous" if run.rendezvous else "eager"
        print(f"  deadlock ({mode}): {result.describe()}")
        if not result.ok:
            code = max(code, EXIT_DEADLOCK)
    return code


def cmd_exec(run: RunConfig, args) -> int:
    dims = run.exec_dims
    P, V, M = run.pipeline.P, run.pipeline.V, run.pipeline.M
    worst = 0.0
    for k in range(int(dims["workloads"])):
        wl = make_workload(run.seed + k, P * V, M, d_in=dims["d_in"], d=dims["d"], samples=dims["samples"])
        ref = sequential_reference(wl.model, wl.data)
        for name in _strategies(run, args):
            result = execute_numeric(_build(run, name), wl.model, wl.data)
            diff = max_grad_diff(result.grads, ref.grads)
            same = bool(np.array_equal(result.losses, ref.losses))
            worst = max(worst, diff)
            if args.format == "csv":
                print(f"{run.seed + k},{name},{diff:.3e},{same},{max(result.peak_encoder_entries)}")
            else:
                print(
                    f"seed {run.seed + k} {name}: max |grad diff| = {diff:.3e}, "
                    f"losses identical: {same}, peak encoder entries: {max(result.peak_encoder_entries)}"
                )
    print(f"worst gradient difference: {worst:.3e}")
    return EXIT_OK


def cmd_render(run: RunConfig | None, args) -> int:
    out = args.out or str(Path(args.trace).with_suffix(".svg"))
    try:
        trace = render_file(args.trace, out)
    except OSError as exc:
        raise CommandFailed(EXIT_CONFIG, f"cannot read {args.trace}: {exc.strerror}")
    except TraceParseError as exc:
        raise CommandFailed(EXIT_CONFIG, f"{args.trace}: {exc}")
    print(f"rendered {len(trace.events)} ops on {trace.P} lanes to {out}")
    return EXIT_OK


def cmd_compare(run: RunConfig, args) -> int:
    strategies = [Strategy.parse(s) for s in _strategies(run, args)]
    report = compare_strategies(run.pipeline, run.cost, run.placement, run.footprint, strategies, run.rendezvous)
    text = report.to_csv() if args.format == "csv" else report.to_text() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", default=os.environ.get(ENV_VAR),
                        help=f"YAML run config (default: ${ENV_VAR})")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. pipeline.M=32")
    common.add_argument("--seed", type=int, default=None, help="seed for sampled costs and workloads")
    common.add_argument("--out", "-o", default=None, help="output file or directory")
    common.add_argument("--format", choices=("text", "csv"), default="text")

    parser = argparse.ArgumentParser(prog="nestpipe", description="Nested multimodal pipeline schedules.")
    sub = parser.add_subparsers(dest="command", required=True)
    names = [s.value for s in Strategy] + ["llm"]

    p = sub.add_parser("schedule", parents=[common], help="write a schedule in the text format")
    p.add_argument("--strategy", "-s", choices=names)
    p.add_argument("--comm", action="store_true", help="include communication ops")
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("simulate", parents=[common], help="simulate and write traces")
    p.add_argument("--strategy", "-s", choices=names)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", parents=[common], help="check dependencies, order property and deadlock")
    p.add_argument("--strategy", "-s", choices=names)
    p.add_argument("--schedule", help="verify a schedule file instead of building one")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("exec", parents=[common], help="run the numeric executor against the sequential oracle")
    p.add_argument("--strategy", "-s", choices=names)
    p.set_defaults(func=cmd_exec)

    p = sub.add_parser("render", parents=[common], help="draw a trace as an SVG Gantt chart")
    p.add_argument("trace")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("compare", parents=[common], help="compare strategies side by side")
    p.add_argument("--strategy", "-s", choices=[s.value for s in Strategy])
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = None
        if args.command != "render":
            run = load_config(args.config, args.overrides, args.seed)
        return args.func(run, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ScheduleError as exc:
        print(f"schedule error: {exc}", file=sys.stderr)
        return EXIT_SCHEDULE
    except SimulationStall as exc:
        print(f"stall: {exc}", file=sys.stderr)
        return EXIT_STALL
    except CommandFailed as exc:
        print(str(exc), file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
