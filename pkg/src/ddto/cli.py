"""Command-line driver: ``ddto <method> <scenario.json> --out DIR``.

A scenario file is validated against the bundled JSON schema, converted to
the library's problem type, solved, and written out as ``tree.json``,
per-target ``traj_<j>.csv``, ``summary.json`` and plot-ready series under
``plotdata/``.  Target labels in every file are 1-based.

Exit codes: 0 success, 1 solver failure or failed checks, 2 invalid input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import oracle
from .micp import ConsistencyError, ScenarioInfeasible, best_anchor, micp_tree, solve_micp, sum_J
from .model import double_integrator_discrete
from .qcvx import (AssumptionViolation, BudgetExhausted, DdtoTree, Scenario, Segment, Target,
                   compare_with_oracle, run_ddto_qcvx, tree_report)
from .scp import (NonconvexScenario, ScpConfig, ScpRoundError, ScpSegment, ScpTree, SizingError,
                  run_ddto_scp, validate_continuous, validation_passes, write_trace)

log = logging.getLogger("ddto")

METHODS = ("qcvx", "micp", "scp", "oracle", "verify")
EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class ScenarioError(ValueError):
    """Invalid scenario file; ``errors`` holds ``(field path, message)`` pairs."""

    def __init__(self, path, errors: list[tuple[str, str]]):
        self.path = str(path)
        self.errors = errors
        super().__init__("\n".join(f"{self.path}: {loc or '<root>'}: {msg}" for loc, msg in errors))


class InputError(ValueError):
    """The scenario is valid but cannot be run with the requested method or flags."""


# --------------------------------------------------------------------------
# scenario loading


@lru_cache(maxsize=1)
def load_schema() -> dict:
    return json.loads(resources.files("ddto").joinpath("scenario.schema.json").read_text(encoding="utf-8"))


def _loc(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


@dataclass
class LoadedScenario:
    path: Path
    data: dict
    model: str
    problem: Scenario | NonconvexScenario | oracle.GridSystem | None

    @property
    def name(self) -> str:
        return self.data["name"]

    @property
    def n_targets(self) -> int:
        if isinstance(self.problem, oracle.GridSystem):
            return self.problem.n_targets
        return len(self.data.get("targets", []))


def load_scenario(path) -> LoadedScenario:
    """Parse, schema-validate and dimension-check a scenario file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(path, [("", f"cannot read file ({exc.strerror})")]) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(path, [(f"line {exc.lineno} column {exc.colno}", exc.msg)]) from None
    validator = jsonschema.Draft202012Validator(load_schema())
    found = []
    for err in validator.iter_errors(data):
        best = jsonschema.exceptions.best_match([err])
        found.append((_loc(best.absolute_path), best.message))
    if found:
        raise ScenarioError(path, sorted(set(found)))
    errors = _check_semantics(data)
    if errors:
        raise ScenarioError(path, errors)
    try:
        problem = _build_problem(data)
    except (ValueError, KeyError, TypeError) as exc:
        raise ScenarioError(path, [("", str(exc))]) from None
    return LoadedScenario(path, data, data["model"]["type"], problem)


def _target_dim(t) -> list[int]:
    if isinstance(t, list):
        return [len(t)]
    if t["kind"] == "box":
        return [len(t["lo"]), len(t["hi"])]
    return [len(t["center"])]


def _check_semantics(d: dict) -> list[tuple[str, str]]:
    errs: list[tuple[str, str]] = []
    kind = d["model"]["type"]
    c = d.get("constraints", {})
    if "u_min" in c and "u_max" in c and c["u_min"] > c["u_max"]:
        errs.append(("constraints.u_min", f"u_min {c['u_min']} exceeds u_max {c['u_max']}"))
    if kind == "grid":
        if "grid" not in d.get("oracle", {}):
            errs.append(("oracle.grid", "grid models need an oracle.grid instance"))
        for blk in ("qcvx", "micp", "scp"):
            if blk in d:
                errs.append((blk, f"not applicable to grid models"))
        return errs
    if kind == "double_integrator" and len(d["model"]["a"]) != 3:
        errs.append(("model.a", "gravity must have 3 components"))
    n_x = 6
    z0_dims = (6,) if kind == "double_integrator" else (6, 7)
    if "z0" not in d:
        errs.append(("z0", "required for this model"))
    elif len(d["z0"]) not in z0_dims:
        errs.append(("z0", f"expected {' or '.join(map(str, z0_dims))} components, got {len(d['z0'])}"))
    targets = d.get("targets")
    if not targets:
        errs.append(("targets", "at least one target is required"))
        targets = []
    for i, t in enumerate(targets):
        if kind == "quadrotor" and isinstance(t, dict) and t["kind"] != "point":
            errs.append((f"targets[{i}]", "quadrotor targets must be points"))
        if any(m != n_x for m in _target_dim(t)):
            errs.append((f"targets[{i}]", f"expected {n_x} components"))
        if isinstance(t, dict) and t["kind"] == "box" and any(a > b for a, b in zip(t["lo"], t["hi"])):
            errs.append((f"targets[{i}]", "box has lo > hi"))
    n = len(targets)
    if "priorities" in d and sorted(d["priorities"]) != list(range(1, n + 1)):
        errs.append(("priorities", f"must be a permutation of 1..{n}"))
    for key, m in (("e", 3), ("u_lo", 3), ("u_hi", 3), ("x_lo", n_x), ("x_hi", n_x)):
        if key in c and len(c[key]) != m:
            errs.append((f"constraints.{key}", f"expected {m} components"))
    if kind == "double_integrator":
        for key in ("obstacles", "v_max", "constraint_weights"):
            if key in c:
                errs.append((f"constraints.{key}", "only supported for quadrotor models"))
        if "scp" in d:
            errs.append(("scp", "the scp method needs a quadrotor model"))
        if "qcvx" in d and len(d["qcvx"]["horizons"]) != n:
            errs.append(("qcvx.horizons", f"expected one horizon per target ({n})"))
        anchor = d.get("micp", {}).get("anchor")
        if isinstance(anchor, int) and anchor > n:
            errs.append(("micp.anchor", f"anchor {anchor} exceeds the number of targets {n}"))
    if kind == "quadrotor":
        for blk in ("qcvx", "micp"):
            if blk in d:
                errs.append((blk, "convex methods need a double_integrator model"))
        if "l_max" not in c:
            errs.append(("constraints.l_max", "required for quadrotor models"))
        n_obs = len(c.get("obstacles", []))
        if "constraint_weights" in c and len(c["constraint_weights"]) != n_obs + 5:
            errs.append(("constraints.constraint_weights", f"expected {n_obs + 5} weights"))
        cfg = d.get("scp", {}).get("config", {})
        if cfg.get("s_min", 1.0) > cfg.get("s_max", 15.0):
            errs.append(("scp.config.s_min", "s_min exceeds s_max"))
    return errs


def _target(t) -> Target:
    if isinstance(t, list):
        return Target.point(t)
    if t["kind"] == "point":
        return Target.point(t["center"])
    if t["kind"] == "box":
        return Target.box(t["lo"], t["hi"])
    return Target.ball(t["center"], t["radius"])


def _build_problem(d: dict):
    kind = d["model"]["type"]
    c = d.get("constraints", {})
    pr = [p - 1 for p in d["priorities"]] if "priorities" in d else None
    if kind == "grid":
        return oracle.GridSystem.from_dict(d["oracle"]["grid"])
    if kind == "double_integrator":
        if "qcvx" not in d:
            return None          # horizons are needed to form the problem
        sys_ = double_integrator_discrete(d["model"]["dt"], d["model"]["a"])
        return Scenario(sys_, d["z0"], [_target(t) for t in d["targets"]], d["qcvx"]["horizons"], pr,
                        u_max=c.get("u_max"), u_min=c.get("u_min"), e=c.get("e"),
                        delta_max_deg=c.get("delta_max_deg"), u_lo=c.get("u_lo"), u_hi=c.get("u_hi"),
                        x_lo=c.get("x_lo"), x_hi=c.get("x_hi"), l_max=c.get("l_max"), name=d["name"])
    targets = [t if isinstance(t, list) else t["center"] for t in d["targets"]]
    kw = {k: c[k] for k in ("u_max", "u_min", "e", "delta_max_deg", "v_max", "constraint_weights") if k in c}
    obstacles = [(o["H"], o["q"]) for o in c.get("obstacles", [])]
    return NonconvexScenario(d["z0"], targets, d.get("scp", {}).get("N", 0), c["l_max"], a=d["model"]["a"],
                             c_d=d["model"].get("c_d", 0.0), obstacles=obstacles, priorities=pr,
                             name=d["name"], **kw)


# --------------------------------------------------------------------------
# serialization


def _plain(obj):
    """JSON-ready copy: numpy to Python, non-finite floats to None, set-likes to sorted lists."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(_plain(v) for v in obj)
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return _plain(obj.item())
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_plain(obj), indent=1, allow_nan=False) + "\n", encoding="utf-8")


def _label(j: int) -> str:
    return str(j + 1)


def _relabel(d: dict) -> dict:
    return {_label(j): d[j] for j in sorted(d)}


def tree_to_dict(tree) -> dict:
    """Structural content of a tree with 1-based labels; floats survive a JSON round trip exactly."""
    pr = [j + 1 for j in tree.priorities]
    if isinstance(tree, ScpTree):
        rounds = [{k: (r[k] if k != "J" else [j + 1 for j in r[k]]) for k in
                   ("round", "J", "M", "trunk_time", "converged", "coincident_with") if k in r}
                  for r in tree.meta.get("rounds", [])]
        return {"kind": "continuous", "priorities": pr, "branch_times": _relabel(tree.branch_times),
                "trunks": [s.to_dict() for s in tree.trunks],
                "branches": {_label(j): tree.branches[j].to_dict() for j in sorted(tree.branches)},
                "rounds": rounds}
    seg = lambda s: {"start": s.start, "states": s.states.tolist(), "inputs": s.inputs.tolist()}
    return {"kind": "discrete", "priorities": pr, "n_u": tree.meta.get("n_u"),
            "branch_times": _relabel(tree.branch_times), "trunks": [seg(s) for s in tree.trunks],
            "branches": {_label(j): seg(tree.branches[j]) for j in sorted(tree.branches)}}


def tree_from_dict(d: dict):
    pr = [p - 1 for p in d["priorities"]]
    bts = {int(k) - 1: v for k, v in d["branch_times"].items()}
    if d["kind"] == "continuous":
        rounds = [{**r, "J": [j - 1 for j in r["J"]]} for r in d.get("rounds", [])]
        return ScpTree([ScpSegment.from_dict(s) for s in d["trunks"]],
                       {int(k) - 1: ScpSegment.from_dict(s) for k, s in d["branches"].items()},
                       bts, pr, {"rounds": rounds})
    if d["kind"] != "discrete":
        raise ValueError(f"no tree type for kind {d['kind']!r}")
    n_u = d.get("n_u") or 0

    def seg(s):
        X = np.array(s["states"], dtype=float)
        return Segment(X, np.array(s["inputs"], dtype=float).reshape(-1, n_u), int(s["start"]))

    return DdtoTree([seg(s) for s in d["trunks"]], {int(k) - 1: seg(s) for k, s in d["branches"].items()},
                    bts, pr, {"n_u": n_u})


def save_tree(tree, path) -> None:
    write_json(path, tree_to_dict(tree))


def load_tree(path):
    return tree_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _state_names(n: int) -> list[str]:
    base = ["rx", "ry", "rz", "vx", "vy", "vz", "theta"]
    return base[:n] if n <= len(base) else [f"x{i + 1}" for i in range(n)]


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


# --------------------------------------------------------------------------
# per-target series


@dataclass
class PathSeries:
    """Node values along one root-to-target path, in physical time."""

    t: np.ndarray
    states: np.ndarray
    inputs: np.ndarray        # one row per interval
    cost: np.ndarray          # cumulative, at nodes
    extra: dict | None = None


def _discrete_series(tree: DdtoTree, sc: Scenario, dt: float) -> dict[int, PathSeries]:
    out = {}
    for j in sorted(tree.branches):
        X, U = tree.full_path(j)
        cost = np.concatenate([[0.0], np.cumsum(np.sum(U ** 2, axis=1))])
        out[j] = PathSeries(dt * np.arange(len(X)), X, U, cost)
    return out


def _continuous_series(tree: ScpTree) -> dict[int, PathSeries]:
    out = {}
    for j in sorted(tree.branches):
        T, X, U, S = tree.full_path(j)
        out[j] = PathSeries(T, X, U, X[:, 6] - X[0, 6], {"s": S})
    return out


def write_trajectories(out: Path, series: dict[int, PathSeries], continuous: bool) -> None:
    for j, ps in series.items():
        n_x, n_u = ps.states.shape[1], ps.inputs.shape[1] if ps.inputs.size else 0
        head = ["k", "t"] + _state_names(n_x) + [f"u{i + 1}" for i in range(n_u)] + ["cost"]
        if continuous:
            head.insert(-1, "s")
        rows = []
        for k in range(len(ps.t)):
            u = ps.inputs[k] if k < len(ps.inputs) else [None] * n_u
            row = [k + 1, _fmt(ps.t[k])] + [_fmt(v) for v in ps.states[k]] + [_fmt(v) for v in u]
            if continuous:
                row.append(_fmt(ps.extra["s"][k]) if k < len(ps.extra["s"]) else "")
            row.append(_fmt(ps.cost[k]))
            rows.append(row)
        _write_csv(out / f"traj_{_label(j)}.csv", head, rows)


def write_plotdata(out: Path, series: dict[int, PathSeries], e=None, bounds: dict | None = None) -> None:
    """Long-format CSVs (one row per target and sample) for position, speed, cost, thrust and pointing."""
    pd = out / "plotdata"
    pd.mkdir(exist_ok=True)
    pos, spd, cst, thr, pnt = [], [], [], [], []
    for j, ps in series.items():
        lab = _label(j)
        for k, t in enumerate(ps.t):
            x = ps.states[k]
            pos.append([lab, _fmt(t)] + [_fmt(v) for v in x[:3]])
            spd.append([lab, _fmt(t), _fmt(np.linalg.norm(x[3:6]))])
            cst.append([lab, _fmt(t), _fmt(ps.cost[k])])
        for k, u in enumerate(ps.inputs):
            nu = float(np.linalg.norm(u))
            thr.append([lab, _fmt(ps.t[k]), _fmt(nu)])
            if e is not None and nu > 0:
                ang = math.degrees(math.acos(float(np.clip(np.dot(e, u) / nu, -1.0, 1.0))))
                pnt.append([lab, _fmt(ps.t[k]), _fmt(ang)])
    _write_csv(pd / "position.csv", ["target", "t", "rx", "ry", "rz"], pos)
    _write_csv(pd / "speed.csv", ["target", "t", "speed"], spd)
    _write_csv(pd / "cost.csv", ["target", "t", "cost"], cst)
    _write_csv(pd / "thrust.csv", ["target", "t", "thrust"], thr)
    _write_csv(pd / "pointing.csv", ["target", "t", "angle_deg"], pnt)
    write_json(pd / "bounds.json", bounds or {})


def _bounds(d: dict) -> dict:
    c = d.get("constraints", {})
    return {k: c[k] for k in ("u_max", "u_min", "v_max", "delta_max_deg", "l_max") if k in c}


# --------------------------------------------------------------------------
# methods


def _need_discrete(ls: LoadedScenario, method: str) -> Scenario:
    if ls.model != "double_integrator":
        raise InputError(f"{method} needs a double_integrator model, got {ls.model}")
    if ls.problem is None:
        raise InputError(f"{method} needs qcvx.horizons in the scenario file")
    return ls.problem


def _discrete_outputs(out: Path, tree: DdtoTree, sc: Scenario, ls: LoadedScenario) -> dict:
    save_tree(tree, out / "tree.json")
    series = _discrete_series(tree, sc, ls.data["model"]["dt"])
    write_trajectories(out, series, continuous=False)
    write_plotdata(out, series, sc.e, _bounds(ls.data))
    rep = tree_report(tree, sc)
    for key in ("terminal_error", "cost", "length"):
        rep[key] = _relabel(rep[key])
    return rep


def run_qcvx(ls: LoadedScenario, args, out: Path) -> tuple[int, dict]:
    sc = _need_discrete(ls, "qcvx")
    blk = ls.data["qcvx"]
    t0 = time.perf_counter()
    tree = run_ddto_qcvx(sc, tol=args.tol or 1e-7, shared_inputs=blk.get("shared_inputs", True))
    elapsed = time.perf_counter() - t0
    rep = _discrete_outputs(out, tree, sc, ls)
    rounds = [{**r, "J": [j + 1 for j in r["J"]]} for r in tree.meta["rounds"]]
    return EXIT_OK, {"branch_times": _relabel(tree.branch_times), "sum_J": tree.sum_J(), "rounds": rounds,
                     "report": rep, "elapsed_s": elapsed}


def run_micp(ls: LoadedScenario, args, out: Path) -> tuple[int, dict]:
    sc = _need_discrete(ls, "micp")
    blk = ls.data.get("micp")
    if blk is None:
        raise InputError("the scenario file has no micp block")
    anchor = args.anchor if args.anchor is not None else blk.get("anchor", "free")
    p = blk.get("p", 2)
    kw = dict(big_M=blk.get("big_M"), p_norm=math.inf if p == "inf" else p, presolve=blk.get("presolve", True),
              time_budget=blk.get("time_budget", 600.0), gap_tol=blk.get("gap_tol", 1e-6), tol=args.tol or 1e-7)
    t0 = time.perf_counter()
    per_anchor = None
    if anchor == "free":
        i, inst, res, per_anchor = best_anchor(sc, **kw)
    else:
        i = int(anchor) - 1
        if not 0 <= i < sc.n_targets:
            raise InputError(f"anchor {anchor} is outside 1..{sc.n_targets}")
        inst, res = solve_micp(sc, i, **kw)
    elapsed = time.perf_counter() - t0
    tree = micp_tree(inst, res)
    rep = _discrete_outputs(out, tree, sc, ls)
    res.export_log(out / "bnb_log.csv")
    summary = {"anchor": i + 1, "objective": res.objective, "bound": res.bound, "gap": res.gap,
               "converged": res.converged, "nodes": res.nodes, "big_M": res.big_M, "sum_J": sum_J(inst, res),
               "branch_times": _relabel(tree.branch_times), "report": rep, "elapsed_s": elapsed}
    if per_anchor is not None:
        summary["objective_per_anchor"] = _relabel(per_anchor)
    return EXIT_OK, summary


def scp_config(ls: LoadedScenario, args) -> ScpConfig:
    cfg = dict(ls.data["scp"].get("config", {}))
    if args.tol is not None:
        cfg["conv_tol"] = args.tol
    if args.max_iter is not None:
        cfg["max_iter"] = args.max_iter
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        return ScpConfig(**cfg)
    except ValueError as exc:
        raise InputError(f"scp.config: {exc}") from None


def run_scp(ls: LoadedScenario, args, out: Path) -> tuple[int, dict]:
    if ls.model != "quadrotor":
        raise InputError(f"scp needs a quadrotor model, got {ls.model}")
    if "scp" not in ls.data:
        raise InputError("the scenario file has no scp block")
    sc = ls.problem
    cfg = scp_config(ls, args)
    t0 = time.perf_counter()
    try:
        tree = run_ddto_scp(sc, N=ls.data["scp"]["N"], cfg=cfg)
    except ScpRoundError as exc:
        write_trace(exc.result.trace, out / f"scp_trace_round{exc.round_index}.csv")
        raise
    elapsed = time.perf_counter() - t0
    save_tree(tree, out / "tree.json")
    series = _continuous_series(tree)
    write_trajectories(out, series, continuous=True)
    write_plotdata(out, series, sc.e, _bounds(ls.data))
    for r in tree.meta["rounds"]:
        write_trace(r["trace"], out / f"scp_trace_round{r['round']}.csv")
    rep = validate_continuous(tree, sc, 50, eps=cfg.eps)
    checks = validation_passes(rep, sc)
    for key in ("cost", "terminal_error"):
        rep[key] = _relabel(rep[key])
    rounds = [{k: v for k, v in r.items() if k != "trace"} for r in tree.meta["rounds"]]
    for r in rounds:
        r["J"] = [j + 1 for j in r["J"]]
    summary = {"branch_times": _relabel(tree.branch_times), "rounds": rounds, "validation": rep,
               "checks": checks, "config": cfg.to_dict(), "elapsed_s": elapsed}
    return (EXIT_OK if checks["all"] else EXIT_FAIL), summary


def run_oracle(ls: LoadedScenario, args, out: Path) -> tuple[int, dict]:
    if ls.model != "grid":
        raise InputError(f"oracle needs a grid model, got {ls.model}")
    g = ls.problem
    t0 = time.perf_counter()
    rep = oracle.check_theorems(g)
    ex = oracle.exhaustive_ddto(g)
    tree = {"kind": "grid", "priorities": list(range(1, g.n_targets + 1)), "anchor": ex.anchor + 1,
            "objective": ex.objective, "J": [sorted(j + 1 for j in Jk) for Jk in ex.J],
            "branch_times": {_label(j): k for j, k in enumerate(ex.branch_times)},
            "trajectories": {_label(j): T.tolist() for j, T in enumerate(ex.trajectories)}}
    write_json(out / "tree.json", tree)
    for j, T in enumerate(ex.trajectories):
        _write_csv(out / f"traj_{_label(j)}.csv", ["k"] + [f"x{i + 1}" for i in range(T.shape[1])],
                   [[k + 1] + [int(v) for v in row] for k, row in enumerate(T)])
    summary = {"checks": rep.checks, "details": rep.details, "objective": ex.objective, "anchor": ex.anchor + 1,
               "objective_per_anchor": _relabel(ex.per_anchor), "branch_times": tree["branch_times"]}
    count = ls.data["oracle"].get("corpus", 0)
    failed = [s for s, inst in enumerate(oracle.corpus(count)) if not oracle.check_theorems(inst).passed]
    summary.update(corpus=count, corpus_failed=failed, elapsed_s=time.perf_counter() - t0)
    return (EXIT_OK if rep.passed and not failed else EXIT_FAIL), summary


def run_verify(ls: LoadedScenario | None, args, out: Path) -> tuple[int, dict]:
    """Theorem battery on a random grid corpus plus the bisection-vs-oracle comparison."""
    blk = (ls.data.get("verify") if ls else None) or {}
    seed0 = args.seed or 0
    t0 = time.perf_counter()
    remark = oracle.restricted_input_certificate()
    theorem_rows = []
    for s, inst in enumerate(oracle.corpus(blk.get("corpus", 60), seed0)):
        rep = oracle.check_theorems(inst)
        theorem_rows.append({"seed": seed0 + s, "passed": rep.passed, "checks": rep.checks, "details": rep.details})
    t1 = time.perf_counter()
    equiv_rows = []
    for s, inst in enumerate(oracle.convex_corpus(blk.get("convex_corpus", 30), 1000 + seed0)):
        for row in compare_with_oracle(inst, tol=args.tol or 1e-7):
            row["J"] = [j + 1 for j in row["J"]]
            equiv_rows.append({"seed": 1000 + seed0 + s, **row})
    t2 = time.perf_counter()
    ok = all(remark.values()) and all(r["passed"] for r in theorem_rows) and all(r["agree"] for r in equiv_rows)
    write_json(out / "verify_report.json", {"restricted_input": remark, "theorems": theorem_rows, "equivalence": equiv_rows})
    summary = {"passed": ok, "restricted_input": remark,
               "theorems": {"instances": len(theorem_rows), "failed": [r["seed"] for r in theorem_rows if not r["passed"]],
                            "elapsed_s": t1 - t0},
               "equivalence": {"subsets": len(equiv_rows),
                               "failed": [[r["seed"], r["J"]] for r in equiv_rows if not r["agree"]],
                               "elapsed_s": t2 - t1}}
    return (EXIT_OK if ok else EXIT_FAIL), summary


RUNNERS = {"qcvx": run_qcvx, "micp": run_micp, "scp": run_scp, "oracle": run_oracle, "verify": run_verify}
SOLVER_FAILURES = (BudgetExhausted, AssumptionViolation, ScpRoundError, ScenarioInfeasible, ConsistencyError,
                   oracle.BudgetExceeded, oracle.UndefinedBranchTime)


# --------------------------------------------------------------------------
# entry point


def _configure_logging() -> None:
    name = os.environ.get("DDTO_LOG", "").strip().lower()
    level = LOG_LEVELS.get(name, logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)
    if name and name not in LOG_LEVELS:
        log.warning("DDTO_LOG=%r not recognized; use one of %s", name, ", ".join(LOG_LEVELS))


def _anchor_arg(v: str):
    if v == "free":
        return v
    try:
        i = int(v)
    except ValueError:
        raise argparse.ArgumentTypeError("expected a 1-based target index or 'free'") from None
    if i < 1:
        raise argparse.ArgumentTypeError("anchor indices start at 1")
    return i


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ddto", description="Deferred-decision trajectory optimization.")
    p.add_argument("method", choices=METHODS)
    p.add_argument("scenario", nargs="?", help="scenario JSON file (optional for verify)")
    p.add_argument("--out", default="ddto_out", help="output directory (created if missing)")
    p.add_argument("--tol", type=float, help="solver tolerance (scp: convergence tolerance)")
    p.add_argument("--max-iter", type=int, help="SCP iteration cap")
    p.add_argument("--seed", type=int, help="seed for randomized initialization and verify corpora")
    p.add_argument("--anchor", type=_anchor_arg, help="micp anchor target (1-based) or 'free'")
    p.add_argument("--report", action="store_true", help="also render PNG figures from plotdata/")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging()
    if args.scenario is None and args.method != "verify":
        parser.print_usage(sys.stderr)
        print(f"ddto: error: {args.method} needs a scenario file", file=sys.stderr)
        return EXIT_INPUT
    if args.max_iter is not None and args.method != "scp":
        log.info("--max-iter only applies to scp; ignored")
    out = Path(args.out)
    try:
        ls = load_scenario(args.scenario) if args.scenario else None
    except ScenarioError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    out.mkdir(parents=True, exist_ok=True)
    head = {"method": args.method, "scenario": ls.name if ls else None}
    try:
        code, summary = RUNNERS[args.method](ls, args, out)
    except (InputError, SizingError) as exc:
        print(f"ddto: error: {exc}", file=sys.stderr)
        write_json(out / "error.json", {**head, "kind": type(exc).__name__, "message": str(exc)})
        return EXIT_INPUT
    except SOLVER_FAILURES as exc:
        print(f"ddto: {args.method} failed: {exc}", file=sys.stderr)
        write_json(out / "error.json", {**head, "kind": type(exc).__name__, "message": str(exc)})
        return EXIT_FAIL
    write_json(out / "summary.json", {**head, **summary})
    if args.report and (out / "plotdata").is_dir():
        from . import plotting

        plotting.render_report(out)
    if code != EXIT_OK:
        print(f"ddto: {args.method} finished with failed checks; see {out / 'summary.json'}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
