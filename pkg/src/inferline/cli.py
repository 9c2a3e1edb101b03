"""Command-line entry point: ``inferline <command> ...``.

Every command reads its inputs from files, writes its outputs atomically
and is deterministic given its inputs and seed. Errors are reported as one
JSON object on stderr and mapped to distinct exit codes.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from inferline import __version__, scenarios
from inferline.core import (
    FORMAT_VERSION,
    HardwareCatalog,
    PipelineConfig,
    PipelineSpec,
    profiles_from_dict,
    profiles_to_dict,
    service_time,
)
from inferline.errors import (
    CatalogError,
    ConfigurationError,
    InfeasibleError,
    InferlineError,
    ProfileError,
    ValidationError,
)
from inferline.estimator import feasible, p99, percentile_nearest_rank, run_simulation
from inferline.harness import CoarseGrainedTuner, cg_plan, queries_csv, replay
from inferline.io import atomic_write_text, dumps, read_json, write_json
from inferline.planner import minimize_cost
from inferline.profiler import executors_from_dict, executors_to_dict, profile_pipeline
from inferline.tuner import TunerState
from inferline.workload import (
    compute_stats,
    generate_gamma_trace,
    generate_varying_trace,
    read_trace,
    write_trace,
)

log = logging.getLogger("inferline")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_CONFIGURATION = 4
EXIT_PROFILE = 5
EXIT_CATALOG = 6

EXIT_CODES = {
    ValidationError: EXIT_VALIDATION,
    InfeasibleError: EXIT_INFEASIBLE,
    ConfigurationError: EXIT_CONFIGURATION,
    ProfileError: EXIT_PROFILE,
    CatalogError: EXIT_CATALOG,
}

SEED_ENV = "INFERLINE_SEED"


# --------------------------------------------------------------------------
# Input helpers
# --------------------------------------------------------------------------


def resolve_seed(seed: int | None) -> int:
    if seed is not None:
        return seed
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
    return v


def int_list(text: str) -> list[int]:
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError("expected at least one integer")
    return out


def segment(text: str) -> tuple[float, float, float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"segment must be LAMBDA:CV:DURATION, got {text!r}")
    try:
        return tuple(float(p) for p in parts)  # type: ignore[return-value]
    except ValueError:
        raise argparse.ArgumentTypeError(f"segment must be numeric, got {text!r}") from None


def load_spec(path) -> PipelineSpec:
    return PipelineSpec.from_dict(read_json(path))


def load_catalog(path) -> HardwareCatalog:
    return HardwareCatalog.from_dict(read_json(path))


def load_profiles(path):
    return profiles_from_dict(read_json(path))


def load_config(path) -> PipelineConfig:
    """A configuration file, or a plan/baseline report that embeds one under ``config``."""
    data = read_json(path)
    if isinstance(data, dict) and "config" in data and "stages" not in data:
        data = data["config"]
    return PipelineConfig.from_dict(data)


def emit(path: str | None, text: str) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        atomic_write_text(path, text)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_trace_gen(args) -> int:
    spec = load_spec(args.spec) if args.spec else None
    trace = generate_gamma_trace(args.lam, args.cv, args.duration, resolve_seed(args.seed), spec)
    write_trace(trace, args.output)
    return EXIT_OK


def cmd_trace_vary(args) -> int:
    spec = load_spec(args.spec) if args.spec else None
    trace = generate_varying_trace(args.segment, args.transition, resolve_seed(args.seed), spec)
    write_trace(trace, args.output)
    return EXIT_OK


def cmd_trace_stats(args) -> int:
    path = args.trace or args.trace_in
    if not path:
        raise ValidationError("trace stats needs a trace file")
    trace = read_trace(path)
    st = compute_stats(trace)
    emit(args.output, dumps({"format_version": FORMAT_VERSION, "queries": st.n, "lambda": st.lam,
                             "sigma": st.sigma, "cv": st.cv, "duration": trace.duration}))
    return EXIT_OK


def cmd_profile(args) -> int:
    spec = load_spec(args.spec)
    executors = executors_from_dict(read_json(args.executors))
    catalog = load_catalog(args.catalog)
    sample = read_trace(args.sample)
    profiles = profile_pipeline(spec, executors, list(catalog), sample, args.batch_sizes)
    write_json(args.output, profiles_to_dict(profiles))
    return EXIT_OK


def _plan_inputs(args):
    return load_spec(args.spec), load_profiles(args.profiles), load_catalog(args.catalog), read_trace(args.trace)


def cmd_plan(args) -> int:
    spec, profiles, catalog, trace = _plan_inputs(args)
    result = minimize_cost(spec, profiles, catalog, trace, args.slo, args.max_replicas)
    report = result.to_dict(catalog)
    report["slo"] = args.slo
    report["service_time"] = service_time(result.config, profiles, spec)
    report["config"] = result.config.to_dict(catalog)
    write_json(args.output, report)
    if args.action_log:
        write_json(args.action_log, {"format_version": FORMAT_VERSION, "initial": report["initial"],
                                     "actions": report["actions"]})
    if args.tuner_state:
        write_json(args.tuner_state, TunerState.from_plan(spec, result.config, profiles, trace).to_dict())
    return EXIT_OK


def cmd_estimate(args) -> int:
    spec = load_spec(args.spec)
    profiles = load_profiles(args.profiles)
    config = load_config(args.config)
    trace = read_trace(args.trace)
    if not len(trace):
        raise ValidationError("estimate needs a nonempty trace")
    res = run_simulation(spec, config, profiles, trace, log=args.log)
    lat = res.latencies
    report = {
        "format_version": FORMAT_VERSION,
        "queries": len(lat),
        "p50": percentile_nearest_rank(lat, 50),
        "p99": p99(lat),
        "max": float(lat.max()),
        "latencies": lat.tolist(),
    }
    if args.slo is not None:
        report["slo"] = args.slo
        report["feasible"] = bool(report["p99"] <= args.slo)
    if args.log:
        report["events"] = res.event_log
    if args.queries_csv and args.slo is None:
        raise ValidationError("--queries-csv needs --slo to mark deadlines")
    write_json(args.output, report)
    if args.queries_csv:
        atomic_write_text(args.queries_csv, queries_csv(res.arrivals, lat, args.slo))
    return EXIT_OK


def _cg_tuner(spec, profiles, config: PipelineConfig) -> CoarseGrainedTuner:
    counts = set(config.replicas().values())
    if len(counts) != 1:
        raise ConfigurationError("policy 'cg' needs a uniformly replicated configuration")
    unit = min(profiles[c.model_id].throughput(c.hardware_id, c.max_batch_size) / profiles[c.model_id].scale_factor
               for c in config if profiles[c.model_id].scale_factor > 0)
    return CoarseGrainedTuner(spec.topo_order, unit, counts.pop())


def cmd_replay(args) -> int:
    spec = load_spec(args.spec)
    profiles = load_profiles(args.profiles)
    catalog = load_catalog(args.catalog)
    config = load_config(args.config)
    trace = read_trace(args.trace)
    state = cg = None
    if args.policy == "inferline":
        if not args.plan_trace:
            raise ConfigurationError("policy 'inferline' needs --plan-trace to build the planning envelope")
        state = TunerState.from_plan(spec, config, profiles, read_trace(args.plan_trace))
    elif args.policy == "cg":
        cg = _cg_tuner(spec, profiles, config)
    report = replay(spec, config, profiles, trace, args.slo, args.policy, catalog=catalog, tuner_state=state,
                    cg_tuner=cg, activation_delay=args.activation_delay)
    write_json(args.output, report.to_dict())
    if args.queries_csv:
        atomic_write_text(args.queries_csv, report.queries_csv())
    return EXIT_OK


def cmd_baseline_cg(args) -> int:
    spec, profiles, catalog, trace = _plan_inputs(args)
    plan = cg_plan(spec, profiles, catalog, trace, args.slo, args.mode)
    f = feasible(spec, plan.config, profiles, trace, args.slo)
    write_json(args.output, {
        "format_version": FORMAT_VERSION,
        "mode": plan.mode,
        "slo": args.slo,
        "batch_size": plan.batch_size,
        "unit_throughput": plan.unit_throughput,
        "units": plan.units,
        "target_rate": plan.target_rate,
        "cost_per_hour": float(plan.config.cost(catalog)),
        "p99": f.p99,
        "feasible": f.feasible,
        "config": plan.config.to_dict(catalog),
    })
    return EXIT_OK


def load_grid(path) -> dict:
    """A sweep grid; file paths inside it are relative to the grid file."""
    data = read_json(path)
    base = Path(path).parent
    if not isinstance(data, dict):
        raise ValidationError("sweep grid: expected a JSON object")
    if data.get("format_version", FORMAT_VERSION) != FORMAT_VERSION:
        raise ValidationError(f"sweep grid: unsupported format_version {data.get('format_version')}")
    missing = [k for k in ("spec", "profiles", "catalog", "plan_trace", "slos") if k not in data]
    if missing:
        raise ValidationError(f"sweep grid: missing keys {missing}")
    slos = data["slos"]
    if not isinstance(slos, list) or not slos or any(not isinstance(x, (int, float)) or x <= 0 for x in slos):
        raise ValidationError("sweep grid: 'slos' must be a nonempty list of positive numbers")
    policies = data.get("policies", ["none"])
    bad = [p for p in policies if p not in ("none", "inferline", "cg")]
    if bad:
        raise ValidationError(f"sweep grid: unknown policies {bad}")
    grid = {k: str(base / data[k]) for k in ("spec", "profiles", "catalog", "plan_trace")}
    grid["traces"] = [str(base / t) for t in data.get("traces", [])]
    grid["slos"] = sorted(set(float(x) for x in slos))
    grid["policies"] = list(policies)
    grid["cg_mode"] = data.get("cg_mode", "peak")
    grid["max_replicas"] = int(data.get("max_replicas", 64))
    return grid


def _sweep_one(job) -> list[dict]:
    """Plan at one SLO, then replay every live trace under every policy."""
    grid, slo, out_dir = job
    spec = load_spec(grid["spec"])
    profiles = load_profiles(grid["profiles"])
    catalog = load_catalog(grid["catalog"])
    plan_trace = read_trace(grid["plan_trace"])
    tag = f"slo{slo!r}"
    try:
        plan = minimize_cost(spec, profiles, catalog, plan_trace, slo, grid["max_replicas"])
    except InfeasibleError as exc:
        return [{"slo": slo, "trace": "", "policy": "plan", "status": "infeasible", "cost": "", "p99": "",
                 "miss_rate": "", "detail": str(exc)}]
    write_json(Path(out_dir) / f"plan_{tag}.json", {**plan.to_dict(catalog), "slo": slo,
                                                    "config": plan.config.to_dict(catalog)})
    rows = [{"slo": slo, "trace": Path(grid["plan_trace"]).name, "policy": "plan", "status": "ok",
             "cost": repr(float(plan.cost)), "p99": repr(plan.p99), "miss_rate": "", "detail": ""}]
    cg = None
    for i, path in enumerate(grid["traces"]):
        live = read_trace(path)
        for policy in grid["policies"]:
            config, state, tuner = plan.config, None, None
            if policy == "inferline":
                state = TunerState.from_plan(spec, plan.config, profiles, plan_trace)
            elif policy == "cg":
                if cg is None:
                    cg = cg_plan(spec, profiles, catalog, plan_trace, slo, grid["cg_mode"])
                config = cg.config
                tuner = CoarseGrainedTuner(spec.topo_order, cg.unit_throughput, cg.units)
            rep = replay(spec, config, profiles, live, slo, policy, catalog=catalog, tuner_state=state,
                         cg_tuner=tuner)
            write_json(Path(out_dir) / f"replay_{tag}_t{i}_{policy}.json", rep.to_dict())
            rows.append({"slo": slo, "trace": Path(path).name, "policy": policy, "status": "ok",
                         "cost": repr(rep.cost), "p99": repr(rep.percentile(99)),
                         "miss_rate": repr(rep.miss_rate), "detail": ""})
    return rows


def cmd_sweep(args) -> int:
    grid = load_grid(args.grid)
    # parse every input once up front so bad files fail with their own exit code
    load_spec(grid["spec"]), load_profiles(grid["profiles"]), load_catalog(grid["catalog"])
    read_trace(grid["plan_trace"])
    for t in grid["traces"]:
        read_trace(t)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(grid, slo, str(out)) for slo in grid["slos"]]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    buf = io.StringIO()
    fields = ["slo", "trace", "policy", "status", "cost", "p99", "miss_rate", "detail"]
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for rows in results:
        for row in rows:
            w.writerow({**row, "slo": repr(row["slo"])})
    atomic_write_text(out / "summary.csv", buf.getvalue())
    return EXIT_OK


def summarize(report: dict) -> str:
    """A short human-readable rendering of a plan, baseline, estimate or replay report."""
    lines = []
    if "policy" in report:
        lines.append(f"replay  policy={report['policy']}  queries={report['queries']}  slo={report['slo']:g}s")
        lines.append(f"  miss rate {100 * report['miss_rate']:.2f}%   p50 {report['p50']:.4f}s   "
                     f"p99 {report['p99']:.4f}s   cost ${report['cost']:.4f}")
        ups = sum(1 for d in report["decisions"] if d["trigger"] == "scale-up")
        downs = sum(1 for d in report["decisions"] if d["trigger"] == "scale-down")
        lines.append(f"  decisions: {ups} up, {downs} down")
    elif "mode" in report:
        lines.append(f"baseline CG-{report['mode'].capitalize()}  units={report['units']}  "
                     f"batch={report['batch_size']}  cost ${report['cost_per_hour']:.4f}/h  p99 {report['p99']:.4f}s")
    elif "actions" in report:
        lines.append(f"plan  cost ${report['cost_per_hour']:.4f}/h  p99 {report['p99']:.4f}s  "
                     f"actions {report['iterations']}  simulations {report['simulations']}")
    elif "latencies" in report:
        lines.append(f"estimate  queries={report['queries']}  p99 {report['p99']:.6g}s  max {report['max']:.6g}s")
        if "feasible" in report:
            lines.append(f"  feasible at slo {report['slo']:g}s: {'yes' if report['feasible'] else 'no'}")
    else:
        raise ValidationError("unrecognised report type")
    cfg = report.get("config")
    if cfg:
        for s in cfg["stages"]:
            lines.append(f"  {s['model_id']:<16} {s['hardware']:<8} batch {s['max_batch_size']:<3} "
                         f"replicas {s['replicas']}")
    return "\n".join(lines) + "\n"


def cmd_summarize(args) -> int:
    emit(args.output, summarize(read_json(args.report)))
    return EXIT_OK


def cmd_scenario(args) -> int:
    sc = scenarios.get(args.name)
    out = Path(args.output)
    write_json(out / "spec.json", sc.spec.to_dict())
    write_json(out / "executors.json", executors_to_dict(sc.executors.values()))
    write_json(out / "catalog.json", sc.catalog.to_dict())
    if args.with_profiles:
        write_json(out / "profiles.json", profiles_to_dict(sc.profiles(seed=resolve_seed(args.seed))))
    return EXIT_OK


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _add_plan_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spec", required=True, help="pipeline spec JSON")
    p.add_argument("--profiles", required=True, help="model profiles JSON")
    p.add_argument("--catalog", required=True, help="hardware catalog JSON")
    p.add_argument("--trace", required=True, help="planning trace")
    p.add_argument("--slo", required=True, type=positive_float, help="P99 latency objective in seconds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inferline", description="Plan and tune simulated inference pipelines.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    trace = sub.add_parser("trace", help="generate or inspect arrival traces")
    tsub = trace.add_subparsers(dest="trace_command", required=True)
    p = tsub.add_parser("gen", help="stationary gamma-renewal trace")
    p.add_argument("--lambda", "--lam", dest="lam", required=True, type=positive_float, help="mean arrival rate (qps)")
    p.add_argument("--cv", required=True, type=positive_float, help="squared coefficient of variation")
    p.add_argument("--duration", required=True, type=positive_float, help="seconds")
    p.add_argument("--spec", help="pipeline spec; when given, conditional path choices are sampled")
    p.add_argument("--seed", type=int, help=f"random seed (default: ${SEED_ENV}, else 0)")
    p.add_argument("-o", "--output", "--out", dest="output", required=True)
    p.set_defaults(func=cmd_trace_gen)

    p = tsub.add_parser("vary", help="piecewise trace with rate or burstiness changes")
    p.add_argument("--segment", required=True, action="append", type=segment,
                   help="LAMBDA:CV:DURATION; repeat in order")
    p.add_argument("--transition", type=float, default=0.0, help="linear ramp between segments (s)")
    p.add_argument("--spec")
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", "--out", dest="output", required=True)
    p.set_defaults(func=cmd_trace_vary)

    p = tsub.add_parser("stats", help="empirical rate and CV of a trace")
    p.add_argument("trace", nargs="?")
    p.add_argument("--in", dest="trace_in", help="trace file (alternative to the positional argument)")
    p.add_argument("-o", "--output", "--out", dest="output", help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_trace_stats)

    p = sub.add_parser("profile", help="profile executors on every catalog hardware type")
    p.add_argument("--spec", required=True)
    p.add_argument("--executors", required=True, help="executor model JSON")
    p.add_argument("--catalog", "--hardware", dest="catalog", required=True, help="hardware catalog JSON")
    p.add_argument("--sample", required=True, help="sample trace used for scale factors")
    p.add_argument("--batch-sizes", type=int_list, help="comma-separated powers of two (default: up to max)")
    p.add_argument("-o", "--output", "--out", dest="output", required=True)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("plan", help="cheapest configuration meeting the SLO on the planning trace")
    _add_plan_inputs(p)
    p.add_argument("--max-replicas", type=int, default=64)
    p.add_argument("--log", dest="action_log", help="also write the action log here")
    p.add_argument("--tuner-state", help="also write the tuner hand-off (envelope, ratios) here")
    p.add_argument("-o", "--output", "--out", dest="output", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("estimate", help="simulate one configuration on a trace")
    p.add_argument("--spec", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--config", required=True, help="config JSON or a plan report")
    p.add_argument("--trace", required=True)
    p.add_argument("--slo", type=positive_float)
    p.add_argument("--log", action="store_true", help="include the full event log")
    p.add_argument("--queries-csv", help="also write per-query latencies as CSV (needs --slo)")
    p.add_argument("-o", "--output", "--out", dest="output", required=True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("replay", help="live replay under a tuning policy")
    p.add_argument("--spec", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--trace", required=True, help="live trace")
    p.add_argument("--slo", required=True, type=positive_float)
    p.add_argument("--policy", choices=("none", "inferline", "cg"), default="none")
    p.add_argument("--plan-trace", help="planning trace (required for --policy inferline)")
    p.add_argument("--activation-delay", type=float, default=5.0)
    p.add_argument("--queries-csv", help="also write per-query latencies as CSV")
    p.add_argument("-o", "--output", "--out", dest="output", required=True)
    p.set_defaults(func=cmd_replay)

    base = sub.add_parser("baseline", help="coarse-grained baselines")
    bsub = base.add_subparsers(dest="baseline_command", required=True)
    p = bsub.add_parser("cg", help="whole-pipeline replication sized to the mean or peak rate")
    _add_plan_inputs(p)
    p.add_argument("--mode", choices=("mean", "peak"), required=True)
    p.add_argument("-o", "--output", "--out", dest="output", required=True)
    p.set_defaults(func=cmd_baseline_cg)

    p = sub.add_parser("sweep", help="plan at several SLOs and replay traces under several policies")
    p.add_argument("--grid", required=True, help="sweep grid JSON (see docs/formats.md)")
    p.add_argument("--out-dir", required=True, help="directory for summary.csv and per-run reports")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("summarize", help="human-readable summary of a JSON report")
    p.add_argument("report")
    p.add_argument("-o", "--output", "--out", dest="output")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("scenario", help="write a built-in scenario's spec, executors and catalog")
    p.add_argument("name", choices=sorted(scenarios.SCENARIOS))
    p.add_argument("-o", "--output", "--out", dest="output", required=True, help="directory")
    p.add_argument("--with-profiles", action="store_true", help="also profile it on a default sample")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_scenario)
    return parser


def error_record(exc: InferlineError) -> dict:
    rec = {"error": exc.code, "message": str(exc)}
    if isinstance(exc, InfeasibleError):
        if exc.service_time is not None:
            rec["service_time"] = exc.service_time
        if exc.slo is not None:
            rec["slo"] = exc.slo
    return rec


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InferlineError as exc:
        code = next((c for cls, c in EXIT_CODES.items() if isinstance(exc, cls)), EXIT_VALIDATION)
        sys.stderr.write(json.dumps(error_record(exc)) + "\n")
        return code
    except OSError as exc:
        sys.stderr.write(json.dumps({"error": "io", "message": str(exc)}) + "\n")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
