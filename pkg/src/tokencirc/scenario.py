"""Scenario files: schema, loading, seeded runs, sweeps and result files."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import os
import statistics
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from .analysis import first_return_stats, hitting_times, tune_timeout_scan, variance_matrix
from .graph import (
    DynamicGraphProcess,
    GraphError,
    averaged_transition_matrix,
    process_from_dict,
    stationary_distribution,
)
from .protocol import ProtocolError, ProtocolParams
from .sim import TRACE_COLUMNS, FaultEvent, FaultModel, RunMetrics, Scenario, ScenarioError, run

logger = logging.getLogger(__name__)

_GRAPH = {
    "type": "object",
    "required": ["n", "edges"],
    "properties": {
        "n": {"type": "integer", "minimum": 1},
        "edges": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2}},
    },
}

SCENARIO_SCHEMA = {
    "type": "object",
    "required": ["params", "horizon"],
    "oneOf": [{"required": ["graph"]}, {"required": ["process"]}],
    "properties": {
        "graph": _GRAPH,
        "process": {
            "type": "object",
            "required": ["states", "transitions"],
            "properties": {
                "states": {"type": "array", "minItems": 1, "items": _GRAPH},
                "transitions": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
            },
        },
        "params": {
            "type": "object",
            "required": ["capacity", "T_m"],
            "properties": {
                "capacity": {"type": "integer", "minimum": 1},
                "T_m": {"oneOf": [{"type": "integer"}, {"const": "auto"}]},
                "epsilon": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "faults": {
            "type": "object",
            "properties": {
                "token_loss_p": {"type": "number", "minimum": 0, "maximum": 1},
                "initial_tokens": {"type": "integer", "minimum": 0},
                "initial_tables": {"enum": ["fresh", "random-corrupt"]},
                "initial_timers": {"enum": ["full", "random"]},
                "link_dynamics": {"type": "boolean"},
                "events": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["round", "kind"],
                        "properties": {
                            "round": {"type": "integer", "minimum": 0},
                            "kind": {"enum": ["delete-token", "duplicate-token", "corrupt-table", "remove-link", "add-link"]},
                        },
                    },
                },
            },
        },
        "horizon": {"type": "integer", "minimum": 1},
        "seeds": {
            "oneOf": [
                {"type": "integer"},
                {"type": "array", "items": {"type": "integer"}},
                {"type": "object", "required": ["start", "stop"],
                 "properties": {"start": {"type": "integer"}, "stop": {"type": "integer"}}},
            ]
        },
        "runs": {"type": "integer", "minimum": 1},
        "reload_wave": {"type": "boolean"},
        "grid": {"type": "object", "additionalProperties": {"type": "array"}},
        "outputs": {
            "type": "object",
            "properties": {"dir": {"type": "string"}, "full_trace": {"type": "boolean"}},
        },
    },
}

GRID_KEYS = {"T_m", "capacity", "horizon", "token_loss_p", "initial_tokens", "initial_tables", "initial_timers", "reload_wave"}


class SchemaError(ValueError):
    """Scenario file is malformed or violates a parameter invariant (CLI exit 2)."""


def scenario_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def derive_seed(base: int, index: int) -> int:
    """Seed of run ``index`` split off ``base``; independent of execution order."""
    return int(np.random.SeedSequence(base, spawn_key=(index,)).generate_state(1)[0])


def expand_seeds(doc: dict) -> list[int]:
    seeds = doc.get("seeds", 0)
    if isinstance(seeds, dict):
        return list(range(seeds["start"], seeds["stop"]))
    if isinstance(seeds, list):
        return list(seeds)
    runs = doc.get("runs", 1)
    return [seeds] if runs == 1 else [derive_seed(seeds, k) for k in range(runs)]


def auto_timeout(process: DynamicGraphProcess, capacity: int, p: float, eps: float) -> int:
    """Scan-tuned timeout from the largest return-time variance of the (averaged) walk."""
    P = averaged_transition_matrix(process, stationary_distribution(process))
    h = hitting_times(P)
    if not np.isfinite(h).all():
        raise SchemaError("T_m auto: some node is not reached almost surely")
    _, rV = first_return_stats(P, h, variance_matrix(P, h))
    return max(tune_timeout_scan(float(rV.max()), p, eps), capacity + 2)


@dataclass
class ScenarioFile:
    doc: dict
    process: DynamicGraphProcess
    seeds: list[int]
    hash: str
    out_dir: Path
    full_trace: bool = False
    grid: Optional[dict] = None

    def build(self, seed: int, overrides: Optional[dict] = None) -> Scenario:
        """Concrete scenario for one seed (and one grid cell)."""
        d = dict(overrides or {})
        params = self.doc["params"]
        faults = self.doc.get("faults", {})
        capacity = d.get("capacity", params["capacity"])
        p_loss = d.get("token_loss_p", faults.get("token_loss_p", 0.0))
        T_m = d.get("T_m", params["T_m"])
        if T_m == "auto":
            if p_loss <= 0 or "epsilon" not in params:
                raise SchemaError("T_m 'auto' requires faults.token_loss_p > 0 and params.epsilon")
            T_m = auto_timeout(self.process, capacity, p_loss, params["epsilon"])
        try:
            pp = ProtocolParams(capacity, int(T_m))
            events = tuple(
                FaultEvent(e["round"], e["kind"], _target(e.get("target"))) for e in faults.get("events", [])
            )
            fm = FaultModel(
                token_loss_p=p_loss,
                initial_tokens=d.get("initial_tokens", faults.get("initial_tokens", 1)),
                initial_tables=d.get("initial_tables", faults.get("initial_tables", "fresh")),
                initial_timers=d.get("initial_timers", faults.get("initial_timers", "full")),
                corrupt_events=events,
                link_dynamics=faults.get("link_dynamics", False),
            )
            return Scenario(
                self.process, pp, fm,
                horizon=d.get("horizon", self.doc["horizon"]),
                seed=seed,
                reload_wave=d.get("reload_wave", self.doc.get("reload_wave", True)),
            )
        except (ProtocolError, ScenarioError) as exc:
            raise SchemaError(str(exc)) from exc


def _target(t):
    if isinstance(t, list):
        return tuple(t)
    return t


def parse_scenario(doc: dict, base_dir: Path = Path(".")) -> ScenarioFile:
    try:
        jsonschema.validate(doc, SCENARIO_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise SchemaError(f"{path}: {exc.message}") from exc
    try:
        if "graph" in doc:
            process = process_from_dict(doc["graph"])
        else:
            pd = dict(doc["process"])
            pd.setdefault("n", pd["states"][0]["n"])
            process = process_from_dict(pd)
    except GraphError as exc:
        raise SchemaError(str(exc)) from exc
    grid = doc.get("grid")
    if grid is not None:
        unknown = set(grid) - GRID_KEYS
        if unknown:
            raise SchemaError(f"grid: unsupported keys {sorted(unknown)}")
    outputs = doc.get("outputs", {})
    sf = ScenarioFile(
        doc=doc,
        process=process,
        seeds=expand_seeds(doc),
        hash=scenario_hash(doc),
        out_dir=(base_dir / outputs.get("dir", "out")),
        full_trace=outputs.get("full_trace", False),
        grid=grid,
    )
    if not sf.seeds:
        raise SchemaError("seeds: empty seed range")
    # parameter invariants are checked before any run
    sf.build(sf.seeds[0])
    return sf


def load_scenario(path: str | Path) -> ScenarioFile:
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return parse_scenario(doc, path.parent)


def grid_cells(grid: Optional[dict]) -> list[dict]:
    if grid is None:
        return [{}]
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise SchemaError("grid is empty")
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


# -- result files --------------------------------------------------------------

def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def trace_csv(rows: list, shash: str, seed: int, cell: Optional[dict] = None) -> str:
    buf = io.StringIO()
    extra = f" cell={json.dumps(cell, sort_keys=True)}" if cell else ""
    buf.write(f"# scenario_hash={shash} seed={seed}{extra}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()


@dataclass
class SeedResult:
    seed: int
    metrics: RunMetrics
    cell: dict = field(default_factory=dict)

    def row(self) -> dict:
        m = self.metrics
        return {
            "seed": self.seed,
            "cell": self.cell,
            "convergence_round": m.convergence_round,
            "stable_from": m.stable_from,
            "cover_round": m.cover_round,
            "r2_creations": m.r2_creations,
            "undue_creations": m.undue_creations,
            "undue_creations_after_A3": m.undue_creations_after_A3,
            "merges": m.merges,
            "wave_launches": m.wave_launches,
            "lost_tokens": m.lost_tokens,
            "lc_rounds": sum(1 for c in m.legitimacy_timeline if c == "LC"),
            "rounds": len(m.legitimacy_timeline),
        }


def summarize(results: list[SeedResult], shash: str) -> dict:
    """SummaryReport as a JSON-ready dict; every aggregate is recomputable from ``per_seed``."""
    rows = [r.row() for r in results]
    conv = [r["convergence_round"] for r in rows]
    reached = [c for c in conv if c is not None]
    lc_rounds = sum(r["lc_rounds"] for r in rows)
    total = sum(r["rounds"] for r in rows)
    return {
        "scenario_hash": shash,
        "seeds": [r["seed"] for r in rows],
        "convergence_rounds": conv,
        "lc_fraction": lc_rounds / total if total else 0.0,
        "r2_creations": [r["r2_creations"] for r in rows],
        "cover_rounds": [r["cover_round"] for r in rows],
        "aggregates": {
            "runs": len(rows),
            "converged_fraction": len(reached) / len(rows) if rows else 0.0,
            "mean_convergence_round": statistics.fmean(reached) if reached else None,
            "median_convergence_round": statistics.median(reached) if reached else None,
            "undue_creations": sum(r["undue_creations"] for r in rows),
            "undue_creations_after_A3": sum(r["undue_creations_after_A3"] for r in rows),
        },
        "per_seed": rows,
    }


def _cell_tag(cell: dict) -> str:
    if not cell:
        return ""
    return "_" + "_".join(f"{k}-{cell[k]}" for k in sorted(cell))


def run_one(sf: ScenarioFile, seed: int, cell: dict) -> SeedResult:
    """Run one (cell, seed) and write its trace files."""
    s = sf.build(seed, cell)
    res = run(s, record_messages=sf.full_trace)
    tag = _cell_tag(cell)
    _atomic_write(sf.out_dir / f"trace{tag}_seed{seed}.csv", trace_csv(res.trace, sf.hash, seed, cell))
    if res.messages is not None:
        header = json.dumps({"scenario_hash": sf.hash, "seed": seed, "cell": cell})
        body = "\n".join(json.dumps(m) for m in res.messages)
        _atomic_write(sf.out_dir / f"messages{tag}_seed{seed}.jsonl", header + "\n" + body + "\n")
    return SeedResult(seed, res.metrics, cell)


def _run_job(args):
    sf, seed, cell = args
    try:
        return run_one(sf, seed, cell), None
    except Exception as exc:  # a failing cell must not stop the sweep
        logger.exception("cell %s seed %d failed", cell, seed)
        return None, f"{type(exc).__name__}: {exc}"


def write_summary(sf: ScenarioFile, summary: dict, name: str = "summary.json") -> Path:
    path = sf.out_dir / name
    _atomic_write(path, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return path


def simulate_file(sf: ScenarioFile) -> dict:
    results = [run_one(sf, seed, {}) for seed in sf.seeds]
    summary = summarize(results, sf.hash)
    write_summary(sf, summary)
    return summary


def sweep_file(sf: ScenarioFile, jobs: int = 1) -> tuple[dict, list]:
    """Run every grid cell for every seed; returns the summary and a list of failures."""
    cells = grid_cells(sf.grid)
    tasks = [(sf, seed, cell) for cell in cells for seed in sf.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(_run_job, tasks))
    else:
        outs = [_run_job(t) for t in tasks]
    failures = []
    by_cell: dict[str, list] = {json.dumps(c, sort_keys=True): [] for c in cells}
    for (_, seed, cell), (res, err) in zip(tasks, outs):
        if err is not None:
            failures.append({"cell": cell, "seed": seed, "error": err})
        else:
            by_cell[json.dumps(cell, sort_keys=True)].append(res)
    summary = {
        "scenario_hash": sf.hash,
        "cells": [
            {"cell": json.loads(k), **summarize(v, sf.hash)} for k, v in by_cell.items()
        ],
        "failures": failures,
    }
    write_summary(sf, summary, "sweep_summary.json")
    return summary, failures
