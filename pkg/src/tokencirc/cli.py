"""Command line: simulate, analyze, tune, sweep.

Exit codes: 0 ok, 1 some sweep cell failed, 2 invalid input, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .graph import GraphError, averaged_transition_matrix, load_process, stationary_distribution, validate_graph
from .scenario import SchemaError, grid_cells, load_scenario, simulate_file, sweep_file

EXIT_OK, EXIT_CELL_FAILED, EXIT_SCHEMA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("tokencirc")


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _write_matrix(path: Path, M: np.ndarray, header: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source"] + [str(j) for j in range(M.shape[1])])
        for i, row in enumerate(M):
            w.writerow([i] + [repr(float(x)) for x in row])


def cmd_simulate(args) -> int:
    try:
        sf = load_scenario(args.scenario)
    except SchemaError as exc:
        return _fail(EXIT_SCHEMA, str(exc))
    if args.out:
        sf.out_dir = Path(args.out)
    try:
        summary = simulate_file(sf)
    except Exception as exc:
        return _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    print(json.dumps({k: summary[k] for k in ("scenario_hash", "seeds", "convergence_rounds", "lc_fraction", "r2_creations", "cover_rounds")}))
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        sf = load_scenario(args.scenario)
        grid_cells(sf.grid)
    except SchemaError as exc:
        return _fail(EXIT_SCHEMA, str(exc))
    if args.out:
        sf.out_dir = Path(args.out)
    try:
        summary, failures = sweep_file(sf, jobs=args.jobs)
    except Exception as exc:
        return _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")
    for c in summary["cells"]:
        agg = c["aggregates"]
        print(f"{json.dumps(c['cell'], sort_keys=True)} runs={agg['runs']} converged={agg['converged_fraction']:.3f} "
              f"median_conv={agg['median_convergence_round']} lc_fraction={c['lc_fraction']:.4f}")
    if failures:
        print(f"{len(failures)} run(s) failed", file=sys.stderr)
        return EXIT_CELL_FAILED
    return EXIT_OK


def cmd_analyze(args) -> int:
    try:
        proc = load_process(args.graph)
    except (OSError, ValueError, GraphError) as exc:
        return _fail(EXIT_SCHEMA, str(exc))
    out = Path(args.out)
    static = len(proc) == 1
    g = proc.states[0]
    if static and not validate_graph(g).connected:
        return _fail(EXIT_RUNTIME, "graph is disconnected")
    try:
        P = g.walk_matrix() if static else averaged_transition_matrix(proc, stationary_distribution(proc))
        h = analysis.hitting_times(P)
        if not np.isfinite(h).all():
            return _fail(EXIT_RUNTIME, "some target is not reached almost surely")
        result: dict = {}
        if args.hitting:
            _write_matrix(out / "hitting.csv", h, "expected hitting times h[source, target]")
            result["hitting"] = h.tolist()
        V = None
        if args.variance or args.return_:
            V = analysis.variance_matrix(P, h)
        if args.variance:
            if args.target is not None:
                col = V[:, [args.target]]
                _write_matrix(out / f"variance_target{args.target}.csv", col, f"V[H_i{args.target}] per source")
                result["variance"] = {str(args.target): V[:, args.target].tolist()}
            else:
                _write_matrix(out / "variance.csv", V, "hitting-time variances V[source, target]")
                result["variance"] = V.tolist()
        if args.distribution is not None:
            targets = [args.target] if args.target is not None else range(proc.n)
            result["distribution"] = {}
            for j in targets:
                F = analysis.hitting_distribution(P, j, args.distribution)
                _write_matrix(out / f"distribution_target{j}.csv", F, f"P[H_ij <= t]; rows t=0..{args.distribution}, columns source i")
                result["distribution"][str(j)] = F[-1].tolist()
        if args.return_:
            if static:
                rh, rV = analysis.return_stats(g, P, h, V)
            else:
                rh, rV = analysis.first_return_stats(P, h, V)
            result["return"] = {"h": rh.tolist(), "V": rV.tolist()}
            _write_matrix(out / "return.csv", np.column_stack([rh, rV]), "columns: return_h, return_V")
    except analysis.AnalysisError as exc:
        return _fail(EXIT_RUNTIME, str(exc))
    print(json.dumps(result))
    return EXIT_OK


def cmd_tune(args) -> int:
    V, h = args.V, args.h
    try:
        if args.graph is not None:
            if args.node is None:
                return _fail(EXIT_SCHEMA, "--graph needs --node")
            proc = load_process(args.graph)
            g = proc.states[0]
            st = analysis.hitting_stats(g) if len(proc) == 1 else None
            if st is None:
                P = averaged_transition_matrix(proc, stationary_distribution(proc))
                hh = analysis.hitting_times(P)
                rh, rV = analysis.first_return_stats(P, hh, analysis.variance_matrix(P, hh))
            else:
                rh, rV = st.return_h, st.return_V
            V, h = float(rV[args.node]), float(rh[args.node])
        if V is None:
            return _fail(EXIT_SCHEMA, "give --V or --graph/--node")
        if args.method == "scan":
            t = analysis.tune_timeout_scan(V, args.p, args.eps, args.t_cap)
            value = t
        else:
            if h is None:
                return _fail(EXIT_SCHEMA, "closed form needs --h (return time)")
            value = analysis.tune_timeout_closed_form(V, h, args.p, args.eps)
            t = math.ceil(value)
            print("warning: closed-form value is conservative; the scan method is authoritative", file=sys.stderr)
    except (analysis.AnalysisError, analysis.TuningError, GraphError, OSError) as exc:
        return _fail(EXIT_RUNTIME if isinstance(exc, analysis.TuningError) else EXIT_SCHEMA, str(exc))
    rec_T_m = max(t, args.capacity + 2) if args.capacity is not None else t
    curve = [(k, analysis.lost_probability_bound(V, args.p, k)) for k in range(1, 2 * t + 1)]
    summary = {
        "inputs": {"V": V, "h": h, "p": args.p, "eps": args.eps, "method": args.method, "capacity": args.capacity},
        "t": value,
        "recommended_T_m": rec_T_m,
        "label": "scan" if args.method == "scan" else "closed-form (conservative, see docs)",
        "curve": [{"t": k, "bound": b} for k, b in curve],
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "bound_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "lost_probability_bound"])
            w.writerows(curve)
        (out / "tune.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"t = {value:.2f}" if isinstance(value, float) else f"t = {value}")
    print(f"recommended T_m = {rec_T_m}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tokencirc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run every seed of a scenario file")
    p.add_argument("scenario")
    p.add_argument("--out", help="override outputs.dir")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="run a scenario over its seed range and parameter grid")
    p.add_argument("scenario")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", help="hitting times, variances, distributions, return times")
    p.add_argument("graph", help="graph or dynamic process JSON")
    p.add_argument("--hitting", action="store_true")
    p.add_argument("--variance", action="store_true")
    p.add_argument("--distribution", type=int, metavar="T_MAX")
    p.add_argument("--return", dest="return_", action="store_true")
    p.add_argument("--target", type=int)
    p.add_argument("--out", default="analysis_out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("tune", help="recommend a timeout from the lost-token bound")
    p.add_argument("--V", type=float, help="return-time variance")
    p.add_argument("--h", type=float, help="return time (closed form only)")
    p.add_argument("--graph")
    p.add_argument("--node", type=int)
    p.add_argument("--p", type=float, required=True, help="per-step loss probability")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--method", choices=("scan", "closed"), default="scan")
    p.add_argument("--capacity", type=int)
    p.add_argument("--t-cap", type=int, default=100_000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_tune)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
