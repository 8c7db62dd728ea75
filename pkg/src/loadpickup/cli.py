"""Command-line entry point: ``loadpickup {reconfigure,restore,validate,sweep-lambda}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from .backends import BackendUnavailable, EnumerationCapError, make_backend
from .driver import DriverError, init_bounds, run_multistep
from .io import NetworkFileError, load_network, report_document, summary_table
from .model import build_model, write_lp
from .network import Mode, RunConfig


def _big_m(text: str) -> Optional[float]:
    if text == "tight":
        return None
    if text.startswith("fixed:"):
        try:
            value = float(text[len("fixed:"):])
        except ValueError:
            pass
        else:
            if value > 0:
                return value
    raise argparse.ArgumentTypeError("expected 'tight' or 'fixed:<positive value>'")


def _lambda_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("segment counts must be positive")
    return vals


def _add_run_flags(p: argparse.ArgumentParser, with_lambda: bool = True) -> None:
    p.add_argument("network", help="network JSON file")
    if with_lambda:
        p.add_argument("--lambda", dest="segments", type=int, default=10,
                       help="PWL segments per square (default 10)")
    p.add_argument("--max-iters", type=int, default=5)
    p.add_argument("--eps-p", type=float, default=0.1, help="mean active error threshold, percent")
    p.add_argument("--eps-q", type=float, default=0.1, help="mean reactive error threshold, percent")
    p.add_argument("--gap", type=float, default=1e-4, help="relative MIP gap")
    p.add_argument("--backend", choices=("enumerate", "external"), default="enumerate")
    p.add_argument("--big-m", type=_big_m, default=None, metavar="{tight,fixed:<value>}")
    p.add_argument("--seed", type=int, default=0, help="seed echoed into the report")
    p.add_argument("--out", type=Path, help="report JSON path (default: stdout)")
    p.add_argument("--table", type=Path, help="also write the per-iteration table here")
    p.add_argument("--dump-model", type=Path, help="write the step-0 model in LP format")
    p.add_argument("--no-timing", action="store_true", help="omit wall-clock fields")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loadpickup",
                                     description="Load pick-up MILP for distribution networks")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_flags(sub.add_parser("reconfigure", help="minimize losses with every load served"))
    _add_run_flags(sub.add_parser("restore", help="maximize served load, islands allowed"))
    v = sub.add_parser("validate", help="check a network file")
    v.add_argument("network")
    s = sub.add_parser("sweep-lambda", help="direct solves over a list of segment counts")
    _add_run_flags(s, with_lambda=False)
    s.add_argument("--lambdas", type=_lambda_list, default=[10, 20, 30, 40, 50],
                   help="comma-separated segment counts")
    s.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.RECONFIGURATION.value)
    return parser


def _emit(text: str, path: Optional[Path]) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text)


def _run(args, mode: Mode) -> int:
    net = load_network(args.network)
    cfg = RunConfig(mode=mode, segments=args.segments, eps_p=args.eps_p, eps_q=args.eps_q,
                    max_iters=args.max_iters, mip_gap=args.gap, big_m=args.big_m)
    backend = make_backend(args.backend)
    if args.dump_model:
        args.dump_model.write_text(write_lp(build_model(net, cfg, init_bounds(net))))
    report = run_multistep(net, cfg, backend)
    timing = not args.no_timing
    doc = report_document(report, timing)
    doc["seed"] = args.seed
    _emit(json.dumps(doc, sort_keys=True, indent=2) + "\n", args.out)
    if args.table:
        args.table.write_text(summary_table(report, timing))
    if not report.ok:
        print(f"run ended {report.termination}", file=sys.stderr)
        return 1
    if report.validation is not None and not report.validation.ok:
        print(f"exact validation failed: {report.validation.message}", file=sys.stderr)
        return 1
    return 0


def _sweep(args) -> int:
    net = load_network(args.network)
    backend = make_backend(args.backend)
    runs = []
    failed = False
    for lam in args.lambdas:
        cfg = RunConfig(mode=Mode(args.mode), segments=lam, eps_p=args.eps_p, eps_q=args.eps_q,
                        max_iters=0, mip_gap=args.gap, big_m=args.big_m)
        report = run_multistep(net, cfg, backend)
        rec = report.iterations[-1]
        failed |= not report.ok
        row = {
            "lambda": lam,
            "termination": report.termination,
            "objective": rec.solution.objective,
            "e_p_mean": rec.e_p_mean,
            "e_q_mean": rec.e_q_mean,
            "rows": rec.model_counts.total_constraints,
        }
        if not args.no_timing:
            row["wall_time"] = rec.wall_time
        runs.append(row)
    doc = {"network": net.name, "backend": args.backend, "seed": args.seed, "runs": runs}
    _emit(json.dumps(doc, sort_keys=True, indent=2, default=str) + "\n", args.out)
    return 1 if failed else 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            net = load_network(args.network)
            print(f"{args.network}: ok ({len(net.buses)} buses, {len(net.feeders)} feeders, "
                  f"{len(net.roots)} root-capable)")
            return 0
        if args.command == "sweep-lambda":
            return _sweep(args)
        mode = Mode.RECONFIGURATION if args.command == "reconfigure" else Mode.RESTORATION
        return _run(args, mode)
    except NetworkFileError as exc:
        print(f"invalid network: {exc}", file=sys.stderr)
        return 3
    except (DriverError, EnumerationCapError, BackendUnavailable, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
