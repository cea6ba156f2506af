"""Command-line entry point: run scenarios, calibrate the cost model, and
sweep scenario directories across policies.

Exit codes: 0 completed, 2 scenario aborted, 1 error.  Defaults can be
overridden with RESILSIM_-prefixed environment variables (SEED, ITERATIONS,
POLICY, OUT, JOBS).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .cluster import MicroBatch
from .harness import load_scenario, run_scenario
from .policies import POLICIES
from .workload import fit_cost_model

ENV_PREFIX = "RESILSIM_"


def _env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resilsim")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one or more scenario files")
    run.add_argument("--scenario", action="append", required=True,
                     help="scenario file (YAML or JSON); repeatable")
    run.add_argument("--out", default=_env("OUT", "out"),
                     help="output directory (per-scenario subdirs when multiple)")
    run.add_argument("--seed", type=int, default=_env("SEED"))
    run.add_argument("--policy", choices=POLICIES, default=_env("POLICY"))
    run.add_argument("--iterations", type=int, default=_env("ITERATIONS"))
    run.add_argument("--jobs", type=int, default=int(_env("JOBS", "1")))

    cal = sub.add_parser("calibrate", help="fit cost model coefficients from a trace")
    cal.add_argument("--trace", required=True,
                     help="text file: one sample per line, 'seconds len1 len2 ...'")

    sweep = sub.add_parser("sweep", help="batch policy comparison over a scenario dir")
    sweep.add_argument("--scenario-dir", required=True)
    sweep.add_argument("--out", default=_env("OUT", "out"))
    sweep.add_argument("--policies", nargs="+", choices=POLICIES, default=list(POLICIES))
    sweep.add_argument("--jobs", type=int, default=int(_env("JOBS", "1")))
    return parser


def _apply_overrides(scenario, args) -> None:
    if args.seed is not None:
        scenario.seed = int(args.seed)
    if args.policy:
        scenario.policy = args.policy
    if args.iterations is not None:
        scenario.iterations = int(args.iterations)


def _run_one(path: str, out_dir: str, seed, policy, iterations) -> dict:
    scenario = load_scenario(path)
    if seed is not None:
        scenario.seed = int(seed)
    if policy:
        scenario.policy = policy
    if iterations is not None:
        scenario.iterations = int(iterations)
    result = run_scenario(scenario, out_dir)
    return result.summary


def cmd_run(args) -> int:
    paths = args.scenario
    multi = len(paths) > 1
    jobs = []
    for path in paths:
        name = Path(path).stem
        out_dir = str(Path(args.out) / name) if multi else args.out
        jobs.append((path, out_dir))
    summaries = []
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [
                pool.submit(_run_one, p, o, args.seed, args.policy, args.iterations)
                for p, o in jobs
            ]
            summaries = [f.result() for f in futures]
    else:
        for p, o in jobs:
            summaries.append(_run_one(p, o, args.seed, args.policy, args.iterations))
    code = 0
    for summary in summaries:
        print(json.dumps({
            "scenario": summary["scenario"],
            "policy": summary["policy"],
            "iterations_completed": summary["iterations_completed"],
            "aborted_at": summary["aborted_at"],
            "throughput_samples_per_s": summary["throughput_samples_per_s"],
        }, sort_keys=True))
        if summary["aborted_at"] is not None:
            code = 2
    return code


def cmd_calibrate(args) -> int:
    samples = []
    for line in Path(args.trace).read_text().splitlines():
        parts = line.split()
        if not parts or line.lstrip().startswith("#"):
            continue
        seconds = float(parts[0])
        lengths = tuple(int(x) for x in parts[1:])
        if not lengths:
            raise ValueError(f"trace line has no document lengths: {line!r}")
        samples.append((
            MicroBatch(id=len(samples), doc_lengths=lengths, token_budget=sum(lengths)),
            seconds,
        ))
    model, mape = fit_cost_model(samples)
    print(f"alpha = {model.alpha:.6e} s/token")
    print(f"beta  = {model.beta:.6e} s/token^2")
    print(f"mape  = {100.0 * mape:.3f}%")
    return 0


def _sweep_one(path: str, policy: str, out_dir: str) -> dict:
    scenario = load_scenario(path)
    scenario.policy = policy
    run_dir = Path(out_dir) / Path(path).stem / policy
    return run_scenario(scenario, run_dir).summary


def cmd_sweep(args) -> int:
    files = sorted(
        p for p in Path(args.scenario_dir).iterdir()
        if p.suffix in (".yaml", ".yml", ".json")
    )
    if not files:
        print(f"no scenario files in {args.scenario_dir}", file=sys.stderr)
        return 1
    tasks = [(str(p), policy) for p in files for policy in args.policies]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_sweep_one, p, policy, args.out) for p, policy in tasks]
            summaries = [f.result() for f in futures]
    else:
        summaries = [_sweep_one(p, policy, args.out) for p, policy in tasks]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["scenario,policy,iterations_completed,aborted_at,avg_iteration_s,throughput_samples_per_s"]
    for s in summaries:
        aborted = "" if s["aborted_at"] is None else str(s["aborted_at"])
        lines.append(
            f"{s['scenario']},{s['policy']},{s['iterations_completed']},{aborted},"
            f"{s['avg_iteration_s']:.9g},{s['throughput_samples_per_s']:.9g}"
        )
    (out / "sweep.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "calibrate":
            return cmd_calibrate(args)
        if args.command == "sweep":
            return cmd_sweep(args)
    except Exception as exc:  # surfaced as exit code 1 per the CLI contract
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
