"""Command-line experiment runner: ``ifpopt run | analyze | list-builtins | export-schema``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import (
    SCHEMA,
    ConfigError,
    Experiment,
    apply_overrides,
    build,
    builtin_names,
    config_hash,
    load,
    load_builtin,
)
from .dynamics import check_nonsingular, reduced_spectral_abscissa
from .gains import threshold_report
from .graph import is_strongly_connected, is_weight_balanced, strongly_connected_components
from .passivity import ifp_index_bruteforce, ifp_index_relaxed_with_eta
from .sim import csv_header, integrate, summarize, write_csv

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2

SUMMARY_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ifpopt run summary",
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "algorithm": {"enum": ["alg1", "alg2"]},
        "t_final": {"type": "number"},
        "steps": {"type": "integer"},
        "final_gap": {"type": "number", "description": "max_i ||x_i - x*|| at the last record"},
        "final_consensus_error": {"type": "number", "description": "max_ij ||x_i - x_j|| at the last record"},
        "consensus_value": {"type": "array", "description": "mean of the final agent states"},
        "x_star": {"type": "array", "description": "centralized optimum"},
        "diverged": {"type": "boolean"},
        "divergence_reason": {"type": ["string", "null"]},
        "max_multiplier_invariant": {"type": "number"},
        "lyapunov": {"type": "object", "description": "max_increment, violations, samples"},
        "violation_count": {"type": "integer", "description": "Lyapunov monitor violations"},
        "passivity": {"type": "object", "description": "present when the per-step storage check ran"},
        "agents": {"type": "array", "description": "per-agent nu_design, nu_pinned, nu_minimax, eta"},
        "thresholds": {"type": "object", "description": "sigma_eig, sigma_deg and per-mode rows"},
        "ujsc_window": {"type": ["number", "null"]},
        "admissibility": {"type": "array", "items": {"type": "string"}},
    },
}

MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "ifpopt run manifest",
    "type": "object",
    "properties": {
        "name": {"type": "string"},
        "anchor": {"type": ["string", "null"], "description": "published result the run reproduces"},
        "source": {"type": "string", "description": "builtin:<name> or a config path"},
        "config_sha256": {"type": "string", "description": "hash of the effective config after overrides"},
        "seed": {"type": "integer"},
        "version": {"type": "string"},
        "outputs": {"type": "array", "items": {"type": "string"}},
        "exit_code": {"type": "integer"},
    },
}


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _dump(obj, path: Path | None = None) -> str:
    text = json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"
    if path is not None:
        path.write_text(text, encoding="utf-8")
    return text


def agent_rows(exp: Experiment) -> list[dict]:
    rows = []
    for i, p in enumerate(exp.network.agents):
        rows.append({
            "agent": i + 1,
            "nu_design": p.nu,
            "nu_pinned": None if exp.pinned_nus is None else exp.pinned_nus[i],
            "nu_minimax": exp.computed_nus[i],
            "eta": exp.computed_etas[i],
        })
    return rows


# --- run -------------------------------------------------------------------

def _targets(args) -> list[tuple[str, str]]:
    out = [("builtin", b) for b in (args.builtin or [])] + [("config", c) for c in (args.config or [])]
    if not out:
        raise ConfigError("give --config PATH or --builtin NAME")
    return out


def run_one(kind: str, ref: str, opts: dict) -> int:
    """Validate, simulate and write artifacts for one config; returns the exit code."""
    try:
        raw = load(builtin=ref) if kind == "builtin" else load(path=ref)
        raw = apply_overrides(raw, seed=opts["seed"], dt=opts["dt"], t_end=opts["t_end"],
                              gain_expr=opts["override_gain"])
        exp = build(raw, allow_inadmissible_gain=opts["allow_inadmissible_gain"])
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID

    out = Path(opts["out"] or raw.get("output", {}).get("dir") or Path("out") / exp.name)
    if opts["subdir"]:
        out = out / exp.name
    out.mkdir(parents=True, exist_ok=True)

    for msg in exp.admissibility:
        print(f"warning: {msg}", file=sys.stderr)
    traj = integrate(exp.sim, exp.problem, exp.init)
    code = EXIT_DIVERGED if traj.diverged else EXIT_OK

    outputs = ["trajectory.csv", "summary.json", "manifest.json"]
    with open(out / "trajectory.csv", "w", encoding="utf-8", newline="") as fh:
        write_csv(traj, fh)
    summary = summarize(traj, exp.problem)
    summary.update({
        "name": exp.name,
        "algorithm": exp.algorithm,
        "agents": agent_rows(exp),
        "thresholds": threshold_report(exp.problem.schedule, exp.design_nus).to_dict(),
        "ujsc_window": exp.ujsc_window,
        "admissibility": exp.admissibility,
    })
    _dump(summary, out / "summary.json")
    if opts["plot"] and raw.get("output", {}).get("plot", True):
        from .plotting import plot_trajectory

        plot_trajectory(traj, out / "trajectory.png", exp.name, exp.problem.optimum.x_star)
        outputs.append("trajectory.png")
    manifest = {
        "name": exp.name,
        "anchor": raw.get("anchor"),
        "source": f"builtin:{ref}" if kind == "builtin" else str(ref),
        "config_sha256": config_hash(raw),
        "seed": exp.seed,
        "version": __version__,
        "outputs": outputs,
        "exit_code": code,
    }
    _dump(manifest, out / "manifest.json")
    status = "diverged" if traj.diverged else "ok"
    print(f"{exp.name}: {status}, final gap {summary['final_gap']:.3e}, "
          f"consensus {summary['consensus_value']}, artifacts in {out}")
    return code


def cmd_run(args) -> int:
    try:
        targets = _targets(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    opts = {
        "seed": args.seed, "dt": args.dt, "t_end": args.t_end, "override_gain": args.override_gain,
        "allow_inadmissible_gain": args.allow_inadmissible_gain, "out": args.out,
        "plot": not args.no_plot, "subdir": len(targets) > 1,
    }
    if args.sweep and len(targets) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            codes = list(pool.map(run_one, *zip(*targets), [opts] * len(targets)))
    else:
        codes = [run_one(k, r, opts) for k, r in targets]
    if EXIT_INVALID in codes:
        return EXIT_INVALID
    return max(codes)


# --- analyze ---------------------------------------------------------------

def analyze(exp: Experiment, bruteforce: bool = False) -> dict:
    net = exp.network
    agents = agent_rows(exp)
    for row, p, f in zip(agents, net.agents, net.objectives):
        row["nu_relaxed"], row["eta_relaxed"] = ifp_index_relaxed_with_eta(p, f.mu, f.lip)
        row["mu"], row["lip"] = f.mu, f.lip
        if bruteforce and f.dim == 1:
            lo = p.eta_lower_bound(f.mu)
            nu_bf, eta_bf = ifp_index_bruteforce(
                p, f, np.linspace(-10.0, 10.0, 401), np.geomspace(lo * 1.001, lo * 100.0, 600)
            )
            row["nu_bruteforce"], row["eta_bruteforce"] = nu_bf, eta_bf
    sched = exp.problem.schedule
    modes = []
    for key, g in enumerate(sched.modes):
        row = {
            "mode": key,
            "balanced": is_weight_balanced(g),
            "strongly_connected": is_strongly_connected(g),
            "sccs": [[i + 1 for i in c] for c in strongly_connected_components(g)],
        }
        if exp.algorithm == "alg2":
            ok, cond = check_nonsingular(g, 1.0, net.nus, [p.J for p in net.agents])
            row["loop_matrix_nonsingular"], row["loop_matrix_cond"] = ok, cond
        modes.append(row)
    report = {
        "name": exp.name,
        "algorithm": exp.algorithm,
        "agents": agents,
        "thresholds": threshold_report(sched, exp.design_nus).to_dict(),
        "thresholds_computed_nu": threshold_report(sched, exp.computed_nus).to_dict(),
        "modes": modes,
        "ujsc": {"verdict": exp.ujsc_window is not None, "min_window": exp.ujsc_window},
        "x_star": exp.problem.optimum.x_star,
        "gain_admissible": not exp.admissibility,
        "admissibility": exp.admissibility,
    }
    for row in report["thresholds"]["per_graph"] + report["thresholds_computed_nu"]["per_graph"]:
        row["sccs"] = [[i + 1 for i in c] for c in row["sccs"]]
    linear = (
        all(f.is_quadratic for f in net.objectives)
        and sched.is_constant
        and exp.problem.gains.kind == "constant"
        and (net.alpha, net.beta, net.gamma) == (1.0, 1.0, 1.0)
        and all(np.array_equal(p.J, np.eye(net.m)) and np.array_equal(p.K, np.eye(net.m)) for p in net.agents)
        and np.array_equal(net.C, np.eye(net.m))
    )
    if linear:
        sigma = float(exp.problem.gains.profiles[0](0.0))
        report["linearized_abscissa"] = reduced_spectral_abscissa(net.objectives, sched.modes[0], sigma)
    return report


def cmd_analyze(args) -> int:
    try:
        targets = _targets(args)
        reports = []
        for kind, ref in targets:
            raw = load(builtin=ref) if kind == "builtin" else load(path=ref)
            raw = apply_overrides(raw, seed=args.seed, dt=args.dt, t_end=args.t_end, gain_expr=args.override_gain)
            exp = build(raw, allow_inadmissible_gain=True)
            reports.append(analyze(exp, args.bruteforce))
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    sys.stdout.write(_dump(reports[0] if len(reports) == 1 else reports))
    return EXIT_OK


def cmd_list(args) -> int:
    for name in builtin_names():
        print(f"{name}\t{load_builtin(name).get('anchor', '')}")
    return EXIT_OK


def cmd_schema(args) -> int:
    docs = {
        "config": SCHEMA,
        "summary": SUMMARY_SCHEMA,
        "manifest": MANIFEST_SCHEMA,
        "csv_columns": csv_header(1, 1)[:1] + ["x_1..x_Nm", "lam_1..lam_Nm"] + csv_header(1, 1)[3:],
    }
    sys.stdout.write(_dump(docs if args.which == "all" else docs[args.which]))
    return EXIT_OK


def _add_source(p: argparse.ArgumentParser):
    p.add_argument("--config", action="append", metavar="PATH", help="experiment TOML file (repeatable)")
    p.add_argument("--builtin", action="append", metavar="NAME", help="bundled experiment (repeatable)")
    p.add_argument("--seed", type=int, help="override the schedule seed")
    p.add_argument("--dt", type=float, help="override the step size")
    p.add_argument("--t-end", type=float, dest="t_end", help="override the horizon")
    p.add_argument("--override-gain", metavar="EXPR", help="replace the gain by sigma(t) = EXPR for all agents")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ifpopt", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="validate, simulate and write CSV/JSON/PNG artifacts")
    _add_source(p)
    p.add_argument("--out", metavar="DIR", help="output directory (default out/<name>)")
    p.add_argument("--allow-inadmissible-gain", action="store_true",
                   help="run the first algorithm even if the gain bound fails")
    p.add_argument("--sweep", action="store_true", help="run several configs in parallel processes")
    p.add_argument("--jobs", type=int, default=None, help="worker processes for --sweep")
    p.add_argument("--no-plot", action="store_true", help="skip the PNG figure")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("analyze", help="print indices, thresholds and graph checks as JSON")
    _add_source(p)
    p.add_argument("--bruteforce", action="store_true", help="add dense-grid IFP indices (slower)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("list-builtins", help="list bundled experiments")
    p.set_defaults(func=cmd_list)

    p = sub.add_parser("export-schema", help="print the JSON schemas of config, summary and manifest")
    p.add_argument("which", nargs="?", default="all", choices=["all", "config", "summary", "manifest"])
    p.set_defaults(func=cmd_schema)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
