"""Command-line interface: run scenarios, sweep the model, compare schemes."""

from __future__ import annotations

import argparse
import sys

from .availability import AnalysisParams, sweep, sweep_csv
from .harness import (
    analyze,
    compare_recovery_schemes,
    load_scenario,
    run_benchmark,
    run_scenario,
)


def _parse_range(spec: str) -> list[float]:
    try:
        lo, hi, step = (float(x) for x in spec.split(":"))
    except ValueError:
        raise SystemExit(f"bad range {spec!r}, expected a:b:step")
    if step <= 0 or hi < lo:
        raise SystemExit(f"bad range {spec!r}")
    values = []
    v = lo
    while v <= hi + 1e-9:
        values.append(round(v, 9))
        v += step
    return values


def _load(path: str, seed: int | None):
    try:
        sc = load_scenario(path)
    except (OSError, ValueError) as exc:
        raise SystemExit(f"scenario error: {exc}")
    if seed is not None:
        from dataclasses import replace
        sc = replace(sc, seed=seed)
    return sc


def _write(path: str | None, text: str) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="migbft",
                                     description="BFT replication with migration-based proactive recovery")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario and report metrics")
    p_run.add_argument("scenario")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--trace-out")
    p_run.add_argument("--csv-out")

    p_sweep = sub.add_parser("sweep", help="closed-form availability sweep")
    p_sweep.add_argument("scenario")
    p_sweep.add_argument("--axis", required=True, choices=("t_reboot", "t_v"))
    p_sweep.add_argument("--range", dest="range_spec", required=True, metavar="A:B:STEP")
    p_sweep.add_argument("--csv-out")

    p_cmp = sub.add_parser("compare", help="simulated migration vs reboot availability")
    p_cmp.add_argument("scenario")
    p_cmp.add_argument("--seeds", type=int, default=32)
    p_cmp.add_argument("--seed", type=int)
    p_cmp.add_argument("--csv-out")

    p_an = sub.add_parser("analyze", help="closed-form windows and availability")
    p_an.add_argument("scenario")

    args = parser.parse_args(argv)

    if args.command == "run":
        sc = _load(args.scenario, args.seed)
        if args.trace_out:
            _world, trace = run_scenario(sc)
            with open(args.trace_out, "w", encoding="utf-8") as fh:
                fh.write("\n".join(trace) + "\n")
        report = run_benchmark(sc)
        print(report.to_text())
        if args.csv_out:
            lines = ["client,window,calls"]
            for client, counts in sorted(report.calls_per_window.items()):
                for idx, count in enumerate(counts):
                    lines.append(f"{client},{idx},{count}")
            _write(args.csv_out, "\n".join(lines) + "\n")
        return 0

    if args.command == "sweep":
        sc = _load(args.scenario, None)
        params = AnalysisParams(t_k=sc.key_refresh_s, r_n=sc.recovery_budget_s,
                                t_reboot=sc.t_reboot_s, t_s_pr=sc.t_save_s,
                                t_s_pm=sc.t_save_s, t_v=sc.window_s)
        try:
            rows = sweep(params, args.axis, _parse_range(args.range_spec))
        except ValueError as exc:
            raise SystemExit(f"sweep error: {exc}")
        _write(args.csv_out, sweep_csv(rows))
        return 0

    if args.command == "compare":
        sc = _load(args.scenario, args.seed)
        result = compare_recovery_schemes(sc, seeds=args.seeds)
        print(f"observed  q_migration={result.q_migration:.4f} q_reboot={result.q_reboot:.4f}")
        print(f"predicted q_migration={result.predicted_migration:.4f} "
              f"q_reboot={result.predicted_reboot:.4f}")
        if args.csv_out:
            _write(args.csv_out, result.to_csv())
        return 0

    if args.command == "analyze":
        sc = _load(args.scenario, None)
        print(analyze(sc))
        return 0

    return 1


if __name__ == "__main__":
    raise SystemExit(main())
