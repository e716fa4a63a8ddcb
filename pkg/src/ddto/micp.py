"""Mixed-integer formulation with big-M coincidence indicators.

For an anchor target ``i`` every other target ``j`` gets binaries
``zeta[j][k]`` with ``||x^i_k - x^j_k||_p <= M zeta[j][k]``; minimizing the
number of active binaries maximizes how long targets stay coincident with the
anchor.  Solved by a best-first branch-and-bound over convex relaxations.
"""

from __future__ import annotations

import csv
import heapq
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import conic
from .conic import ProgramBuilder, Status
from .qcvx import (COINCIDENCE_TOL, AssumptionViolation, DdtoTree, Scenario, Segment, _add_input_rows,
                   _add_state_rows, _add_target_rows, _scales, max_branch_time)

log = logging.getLogger(__name__)

EXTRACT_TOL = 1e-5
INT_TOL = 1e-6


class ScenarioInfeasible(RuntimeError):
    """The root relaxation is infeasible."""


class ConsistencyError(RuntimeError):
    """Extracted target sets violate the counting identity."""


@dataclass
class MicpInstance:
    scenario: Scenario
    anchor: int
    big_M: float
    p_norm: float
    binaries: dict[tuple[int, int], int]          # (j, k) -> position in zeta vector (k is 1-based)
    horizons: dict[int, int]                      # N^{ij} per j != anchor
    cuts: bool = True
    forced_one: set = field(default_factory=set)  # presolve: coincidence impossible
    budget: float | None = None

    def __post_init__(self):
        if not self.big_M > 0:
            raise ValueError("big_M must be positive")
        if self.p_norm not in (1, 2, math.inf):
            raise ValueError("p_norm must be 1, 2 or inf")

    @property
    def n_binaries(self) -> int:
        return len(self.binaries)


def default_big_M(sc: Scenario) -> float:
    """Twice the diameter of the box spanned by z0, the targets and any finite state bounds."""
    pts = [sc.z0] + [t.representative() for t in sc.targets]
    for t in sc.targets:
        if t.kind == "box":
            pts += [t.lo, t.hi]
        if t.kind == "ball":
            pts += [t.center - t.radius, t.center + t.radius]
    P = np.array(pts)
    lo, hi = P.min(axis=0), P.max(axis=0)
    if sc.x_lo is not None:
        lo = np.minimum(lo, np.where(np.isfinite(sc.x_lo), sc.x_lo, lo))
    if sc.x_hi is not None:
        hi = np.maximum(hi, np.where(np.isfinite(sc.x_hi), sc.x_hi, hi))
    return 2.0 * max(1.0, float(np.linalg.norm(hi - lo)))


def build_micp(scenario: Scenario, i: int, big_M: float | None = None, p_norm: float = 2,
               cuts: bool = True, presolve: bool = False, budget: float | None = None,
               z0=None) -> MicpInstance:
    """Binary layout for anchor ``i`` (0-based); programs are built per node."""
    if big_M is None:
        big_M = default_big_M(scenario)
    if big_M <= 0:
        raise ValueError("big_M must be positive")
    n = scenario.n_targets
    hz = {j: min(scenario.horizons[i], scenario.horizons[j]) for j in range(n) if j != i}
    binaries = {}
    for j in sorted(hz):
        for k in range(1, hz[j] + 1):
            binaries[(j, k)] = len(binaries)
    inst = MicpInstance(scenario, i, float(big_M), p_norm, binaries, hz, cuts,
                        budget=scenario.l_max if budget is None else budget)
    if presolve and n > 1:
        # pairwise coincidence limits are valid for every integer-feasible point
        z = scenario.z0 if z0 is None else z0
        for j in hz:
            try:
                kij = max_branch_time([i, j], scenario.horizons, z, inst.budget, scenario, realize=False).k
            except AssumptionViolation as exc:
                raise ScenarioInfeasible(str(exc)) from exc
            for k in range(kij + 1, hz[j] + 1):
                inst.forced_one.add((j, k))
    return inst


@dataclass
class _NodeProgram:
    prog: conic.ConicProgram
    zeta: np.ndarray
    states: dict[int, list]
    inputs: dict[int, list]
    Dx: np.ndarray
    Du: np.ndarray


def _build_node(inst: MicpInstance, fixed_zero: set, fixed_one: set, objective: str = "count") -> _NodeProgram:
    sc = inst.scenario
    sys_ = sc.system
    Dx, Du = _scales(sc)
    nx, nu = sys_.n_x, sys_.n_u
    A_hat = (sys_.A * Dx[None, :]) / Dx[:, None]
    B_hat = (sys_.B * Du[None, :]) / Dx[:, None]
    c_hat = sys_.c / Dx
    b = ProgramBuilder()
    states, inputs = {}, {}
    for j in range(sc.n_targets):
        xs = [b.var(f"x{j}_1", nx)]
        b.eq([(xs[0], np.eye(nx))], -sc.z0 / Dx)
        us = []
        for k in range(1, sc.horizons[j]):
            u = b.var(f"u{j}_{k}", nu)
            _add_input_rows(b, sc, u, Du)
            x = b.var(f"x{j}_{k + 1}", nx)
            _add_state_rows(b, sc, x, Dx)
            b.eq([(x, np.eye(nx)), (xs[-1], -A_hat), (u, -B_hat)], -c_hat)
            us.append(u)
            xs.append(x)
        _add_target_rows(b, sc.targets[j], xs[-1], Dx)
        if inst.budget is not None:
            if inst.budget < 0:
                b.nonneg([], [-1.0])
            elif us:
                conic.quad_cost_as_cone(b, np.concatenate(us), inst.budget / Du[0] ** 2)
        states[j], inputs[j] = xs, us
    zeta = b.var("zeta", inst.n_binaries)
    i = inst.anchor
    M = inst.big_M
    zero = set(fixed_zero)
    one = set(fixed_one) | set(inst.forced_one)
    for (j, k), pos in inst.binaries.items():
        z = zeta[pos]
        xi, xj = states[i][k - 1], states[j][k - 1]
        if (j, k) in zero:
            b.eq([(z, 1.0)], [0.0])
            b.eq([(xi, np.eye(nx)), (xj, -np.eye(nx))], np.zeros(nx))
            continue
        if (j, k) in one:
            b.eq([(z, 1.0)], [-1.0])
        else:
            b.nonneg([(z, 1.0)], [0.0])
            b.nonneg([(z, -1.0)], [1.0])
        D = np.diag(Dx)
        if inst.p_norm == 2:
            b.soc([(np.r_[z], np.r_[M, np.zeros(nx)][:, None]), (xi, np.vstack([np.zeros((1, nx)), D])),
                   (xj, np.vstack([np.zeros((1, nx)), -D]))], np.zeros(nx + 1))
        elif inst.p_norm == math.inf:
            b.nonneg([(np.full(nx, z), np.full(nx, M)), (xi, -D), (xj, D)], np.zeros(nx))
            b.nonneg([(np.full(nx, z), np.full(nx, M)), (xi, D), (xj, -D)], np.zeros(nx))
        else:
            t = b.var(f"abs_{j}_{k}", nx)
            b.nonneg([(t, np.eye(nx)), (xi, -D), (xj, D)], np.zeros(nx))
            b.nonneg([(t, np.eye(nx)), (xi, D), (xj, -D)], np.zeros(nx))
            b.nonneg([(np.r_[z], np.array([[M]])), (t, -np.ones((1, nx)))], [0.0])
    if inst.cuts:
        for (j, k), pos in inst.binaries.items():
            if (j, k + 1) in inst.binaries:
                b.nonneg([(zeta[inst.binaries[(j, k + 1)]], 1.0), (zeta[pos], -1.0)], [0.0])
    if objective == "count":
        b.add_objective(zeta, 1.0)
    elif objective == "energy":
        all_u = np.concatenate([np.concatenate(us) for us in inputs.values() if us])
        t = b.var("energy")
        b.add_objective(t, 1.0)
        kk = all_u.size
        b.soc([(np.r_[t], np.r_[1.0, np.zeros(kk)][:, None]),
               (all_u, np.vstack([np.zeros((1, kk)), np.eye(kk)]))], np.zeros(kk + 1))
    return _NodeProgram(b.build(), zeta, states, inputs, Dx, Du)


@dataclass
class BnbNode:
    fixed_zero: frozenset
    fixed_one: frozenset
    bound: float = -math.inf
    depth: int = 0
    node_id: int = 0

    def __post_init__(self):
        if self.fixed_zero & self.fixed_one:
            raise ValueError("a binary cannot be fixed to both 0 and 1")


@dataclass
class RelaxedResult:
    result: conic.SolveResult
    value: float
    zeta: dict[tuple[int, int], float]
    earliest_fractional: dict[int, int | None]
    trajectories: dict[int, tuple[np.ndarray, np.ndarray]] | None


def _extract(np_: _NodeProgram, x: np.ndarray):
    out = {}
    for j in np_.states:
        X = np.array([np_.Dx * x[v] for v in np_.states[j]])
        U = np.array([np_.Du * x[v] for v in np_.inputs[j]]).reshape(-1, len(np_.Du))
        out[j] = (X, U)
    return out


def solve_relaxed(inst: MicpInstance, node: BnbNode, tol: float = 1e-7, backend: str = "ipm") -> RelaxedResult:
    """Convex relaxation at ``node`` (binaries boxed to [0, 1], fixings applied)."""
    npg = _build_node(inst, node.fixed_zero, node.fixed_one)
    res = conic.solve(npg.prog, tol=tol, backend=backend)
    if res.status is not Status.OPTIMAL:
        return RelaxedResult(res, math.inf, {}, {}, None)
    zv = res.x[npg.zeta]
    zeta = {key: float(zv[pos]) for key, pos in inst.binaries.items()}
    earliest = {}
    for j in inst.horizons:
        earliest[j] = next((k for k in range(1, inst.horizons[j] + 1)
                            if INT_TOL < zeta[(j, k)] < 1 - INT_TOL), None)
    return RelaxedResult(res, float(np.sum(zv)), zeta, earliest, _extract(npg, res.x))


def _propagate(inst: MicpInstance, zero: set, one: set) -> tuple[set, set] | None:
    """Close fixings under monotonicity: 0 at k forces 0 before k, 1 at k forces 1 after."""
    zero, one = set(zero), set(one) | set(inst.forced_one)
    if inst.cuts:
        for (j, k) in list(zero):
            zero.update((j, kk) for kk in range(1, k))
        for (j, k) in list(one):
            one.update((j, kk) for kk in range(k, inst.horizons[j] + 1))
    if zero & one:
        return None
    return zero, one


def _pattern_from_branch_times(inst: MicpInstance, kj: dict[int, int]) -> tuple[set, set]:
    zero = {(j, k) for j in inst.horizons for k in range(1, kj[j] + 1)}
    one = {(j, k) for j in inst.horizons for k in range(kj[j] + 1, inst.horizons[j] + 1)}
    return zero, one


def _ceil(v: float) -> float:
    """Ceiling with a small allowance for solver tolerance (the objective is integral)."""
    return math.ceil(v - 1e-6) if math.isfinite(v) else v


@dataclass
class BnbResult:
    objective: float
    bound: float
    gap: float
    converged: bool
    branch_times: dict[int, int]                  # per non-anchor target (local coincidence length)
    trajectories: dict[int, tuple[np.ndarray, np.ndarray]]
    zeta: dict[tuple[int, int], int]
    log: list[dict]
    nodes: int
    big_M: float
    anchor: int

    def export_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node", "depth", "bound", "status", "incumbent"])
            for r in self.log:
                w.writerow([r["node"], r["depth"], r["bound"], r["status"], r["incumbent"]])


def _fixed_solve(inst, zero, one, tol, backend):
    """Continuous solve with every binary fixed; minimum-energy trajectories."""
    npg = _build_node(inst, zero, one, objective="energy")
    res = conic.solve(npg.prog, tol=min(tol, 1e-9), backend=backend)
    if res.status is not Status.OPTIMAL:
        res = conic.solve(npg.prog.with_objective(np.zeros(npg.prog.n)), tol=tol, backend=backend)
    if res.status is not Status.OPTIMAL:
        return None
    return _extract(npg, res.x)


def branch_and_bound(inst: MicpInstance, time_budget: float = 600.0, gap_tol: float = 1e-6,
                     tol: float = 1e-7, backend: str = "ipm") -> BnbResult:
    """Best-first branch-and-bound with monotone fixing propagation.

    The objective is integral, so a node is pruned when the ceiling of its
    relaxation bound cannot beat the incumbent.
    """
    t0 = time.perf_counter()
    sc = inst.scenario
    if not inst.binaries:
        traj = _fixed_solve(inst, set(), set(), tol, backend)
        if traj is None:
            raise ScenarioInfeasible("single-target problem is infeasible")
        return BnbResult(0.0, 0.0, 0.0, True, {}, traj, {}, [], 1, inst.big_M, inst.anchor)

    best_obj = math.inf
    best_kj: dict[int, int] | None = None
    counter = 0
    heap: list = []
    logrows: list[dict] = []

    def consider(kj: dict[int, int]):
        nonlocal best_obj, best_kj
        obj = sum(inst.horizons[j] - kj[j] for j in kj)
        if obj >= best_obj:
            return
        zero, one = _pattern_from_branch_times(inst, kj)
        if zero & inst.forced_one:
            return
        npg = _build_node(inst, zero, one, objective="none")
        if conic.check_feasible(npg.prog, tol=tol, backend=backend):
            best_obj, best_kj = obj, dict(kj)

    root = _propagate(inst, set(), set())
    heapq.heappush(heap, (-math.inf, 0, counter, frozenset(root[0]), frozenset(root[1])))
    lower = -math.inf
    while heap:
        if logrows and time.perf_counter() - t0 > time_budget:
            break
        bound_parent, depth, nid, zero, one = heapq.heappop(heap)
        if _ceil(bound_parent) >= best_obj:
            continue
        node = BnbNode(zero, one, bound_parent, depth, nid)
        rel = solve_relaxed(inst, node, tol, backend)
        status = rel.result.status.value
        incumbent_before = best_obj
        if rel.trajectories is not None:
            # incumbent from actual coincidence of the relaxed trajectories (monotone prefix)
            Xi = rel.trajectories[inst.anchor][0]
            kj = {}
            for j in inst.horizons:
                Xj = rel.trajectories[j][0]
                k = 0
                while k < inst.horizons[j] and np.max(np.abs(Xi[k] - Xj[k])) <= EXTRACT_TOL * max(1, np.max(np.abs(Xi[k]))):
                    k += 1
                kj[j] = max(k, 1)
            consider(kj)
            if depth == 0:
                # threshold rounding at 0.5
                kj2 = {j: max(1, next((k - 1 for k in range(1, inst.horizons[j] + 1)
                                         if rel.zeta[(j, k)] >= 0.5), inst.horizons[j])) for j in inst.horizons}
                consider(kj2)
        logrows.append({"node": nid, "depth": depth, "bound": rel.value, "status": status,
                        "incumbent": best_obj if best_obj < math.inf else ""})
        log.debug("node %d depth %d: %s bound %.6g incumbent %s", nid, depth, status, rel.value, best_obj)
        if rel.trajectories is None or _ceil(rel.value) >= best_obj:
            continue
        frac = {j: k for j, k in rel.earliest_fractional.items() if k is not None}
        if not frac:
            # integral relaxation: its pattern is feasible
            kj = {j: next((k - 1 for k in range(1, inst.horizons[j] + 1) if rel.zeta[(j, k)] >= 0.5),
                          inst.horizons[j]) for j in inst.horizons}
            obj = round(rel.value)
            if obj < best_obj:
                best_obj = obj
                best_kj = kj
            continue
        # target with the largest fractional mass, earliest fractional time
        mass = {j: sum(min(rel.zeta[(j, k)], 1 - rel.zeta[(j, k)]) for k in range(1, inst.horizons[j] + 1))
                for j in frac}
        jb = max(sorted(frac), key=lambda j: mass[j])
        kb = frac[jb]
        for val in (0, 1):
            z2, o2 = set(zero), set(one)
            (z2 if val == 0 else o2).add((jb, kb))
            prop = _propagate(inst, z2, o2)
            if prop is None:
                continue
            counter += 1
            heapq.heappush(heap, (rel.value, depth + 1, counter, frozenset(prop[0]), frozenset(prop[1])))
    if best_kj is None and logrows and logrows[0]["status"] == Status.OPTIMAL.value:
        # stopped early: coinciding only at the shared start is always a candidate
        consider({j: 1 for j in inst.horizons})
    open_bounds = [h[0] for h in heap if _ceil(h[0]) < best_obj]
    bound = min(open_bounds) if open_bounds else best_obj
    if best_kj is None:
        if not logrows or logrows[0]["status"] != Status.OPTIMAL.value:
            raise ScenarioInfeasible("root relaxation infeasible")
        raise RuntimeError("no integer-feasible point found within the time budget")
    converged = not open_bounds
    gap = 0.0 if converged else (best_obj - max(bound, 0.0)) / max(1.0, abs(best_obj))
    zero, one = _pattern_from_branch_times(inst, best_kj)
    traj = _fixed_solve(inst, zero, one, tol, backend)
    zeta = {key: int(key in one) for key in inst.binaries}
    return BnbResult(float(best_obj), float(bound), gap, converged and gap <= gap_tol, best_kj, traj, zeta,
                     logrows, len(logrows), inst.big_M, inst.anchor)


def big_M_valid(inst: MicpInstance, res: BnbResult) -> bool:
    """No active big-M row uses more than 99% of M."""
    Xi = res.trajectories[inst.anchor][0]
    ordn = {1: 1, 2: 2, math.inf: np.inf}[inst.p_norm]
    for (j, k), v in res.zeta.items():
        d = np.linalg.norm(Xi[k - 1] - res.trajectories[j][0][k - 1], ordn)
        if d >= 0.99 * inst.big_M:
            return False
    return True


def solve_micp(scenario: Scenario, anchor: int, big_M: float | None = None, p_norm: float = 2,
               cuts: bool = True, presolve: bool = True, time_budget: float = 600.0, gap_tol: float = 1e-6,
               tol: float = 1e-7, backend: str = "ipm", max_doublings: int = 5) -> tuple[MicpInstance, BnbResult]:
    """Build and solve the anchored problem, doubling big-M until the validity check passes."""
    M = default_big_M(scenario) if big_M is None else big_M
    for attempt in range(max_doublings + 1):
        inst = build_micp(scenario, anchor, M, p_norm, cuts, presolve)
        try:
            res = branch_and_bound(inst, time_budget, gap_tol, tol, backend)
        except ScenarioInfeasible:
            # a big-M below the trajectory separation also empties the relaxation
            if attempt == max_doublings:
                raise
            log.info("root relaxation infeasible with big-M %.3g; doubling", M)
            M *= 2
            continue
        if big_M_valid(inst, res):
            return inst, res
        log.info("big-M %.3g too small; doubling", M)
        M *= 2
    return inst, res


@dataclass
class TargetSets:
    J: list[frozenset]              # J_1..J_N (0-based target indices)
    branch_times: dict[int, int]


def extract_target_sets(inst: MicpInstance, res: BnbResult, tol: float = EXTRACT_TOL) -> TargetSets:
    """Sets of targets coincident with the anchor at each time, and their branch times.

    Verifies ``objective + sum_k |J_k \\ {anchor}| = sum_j N^{ij}`` over the
    shared horizons.
    """
    i = inst.anchor
    Xi = res.trajectories[i][0]
    N = len(Xi)
    J = []
    for k in range(1, N + 1):
        s = {i}
        for j in inst.horizons:
            Xj = res.trajectories[j][0]
            if k <= min(len(Xj), N) and np.max(np.abs(Xi[k - 1] - Xj[k - 1])) <= tol * max(1.0, np.max(np.abs(Xi[k - 1]))):
                s.add(j)
        J.append(frozenset(s))
    count = sum(len([j for j in Jk if j != i and k + 1 <= inst.horizons[j]]) for k, Jk in enumerate(J))
    total = sum(inst.horizons.values())
    # coincidence is forced wherever a binary is 0; beyond that it can only appear if the
    # search stopped early, since extra coincidence would lower the objective
    short = res.objective + count < total - 1e-9
    excess = res.converged and res.objective + count > total + 1e-9
    if short or excess:
        raise ConsistencyError(f"objective {res.objective} + {count} != {total}")
    bt = {j: max((k + 1 for k, Jk in enumerate(J) if j in Jk), default=0) for j in list(inst.horizons) + [i]}
    return TargetSets(J, bt)


def best_anchor(scenario: Scenario, **kw) -> tuple[int, MicpInstance, BnbResult, dict[int, float]]:
    """Solve for every anchor; the smallest objective wins, ties to the lowest index."""
    results = {}
    for i in range(scenario.n_targets):
        results[i] = solve_micp(scenario, i, **kw)
    objs = {i: r[1].objective for i, r in results.items()}
    i_star = min(objs, key=lambda i: (objs[i], i))
    return i_star, results[i_star][0], results[i_star][1], objs


def micp_tree(inst: MicpInstance, res: BnbResult) -> DdtoTree:
    """Tree view of a solution: the anchor path is the trunk, others branch off it."""
    sc = inst.scenario
    i = inst.anchor
    Xi, Ui = res.trajectories[i]
    ts = extract_target_sets(inst, res)
    order = sorted(ts.branch_times, key=lambda j: (-ts.branch_times[j], j))
    trunk = Segment(sc.system.rollout(sc.z0, Ui), Ui, 1)
    branches, bts = {}, {}
    for j in order:
        kj = ts.branch_times[j]
        X, U = res.trajectories[j] if j != i else (Xi, Ui)
        U_b = U[kj - 1:]
        branches[j] = Segment(sc.system.rollout(trunk.states[kj - 1], U_b), U_b, kj)
        bts[j] = kj
    return DdtoTree([trunk], branches, bts, list(sc.priorities),
                    {"anchor": i, "objective": res.objective, "n_u": sc.system.n_u})


def sum_J(inst: MicpInstance, res: BnbResult) -> int:
    """sum_k |J_k| including the anchor, over the anchor's horizon."""
    return sum(len(Jk) for Jk in extract_target_sets(inst, res).J)
