"""Deferred-decision trees for discrete affine systems by bisection.

The coincidence horizon of a set of trajectories is quasiconcave in the
decision variables: for a fixed ``k_star`` the set of trajectory tuples that
coincide up to ``k_star`` is convex.  The latest branch time is therefore
found by bisection over convex feasibility problems, and the full tree is
built by repeatedly rejecting the lowest-priority remaining target and
restarting from the branch point.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import conic
from .conic import Feasibility, ProgramBuilder
from .model import DiscreteAffineSystem, double_integrator_discrete

log = logging.getLogger(__name__)

COINCIDENCE_TOL = 1e-6


class AssumptionViolation(RuntimeError):
    """Some target is not reachable from the initial state."""


class BudgetExhausted(RuntimeError):
    """A recursion round could not keep all remaining targets feasible."""


# --------------------------------------------------------------------------
# scenario


@dataclass(frozen=True)
class Target:
    """Terminal set: a point, an axis-aligned box, or a Euclidean ball."""

    kind: str
    center: np.ndarray | None = None
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    radius: float = 0.0

    @classmethod
    def point(cls, z) -> "Target":
        return cls("point", center=np.asarray(z, dtype=float))

    @classmethod
    def box(cls, lo, hi) -> "Target":
        return cls("box", lo=np.asarray(lo, dtype=float), hi=np.asarray(hi, dtype=float))

    @classmethod
    def ball(cls, center, radius) -> "Target":
        return cls("ball", center=np.asarray(center, dtype=float), radius=float(radius))

    def representative(self) -> np.ndarray:
        if self.kind == "box":
            return 0.5 * (self.lo + self.hi)
        return self.center

    def distance(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if self.kind == "point":
            return float(np.max(np.abs(x - self.center)))
        if self.kind == "box":
            return float(np.max(np.maximum(0, np.maximum(self.lo - x, x - self.hi)), initial=0.0))
        return max(0.0, float(np.linalg.norm(x - self.center)) - self.radius)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind in ("point", "ball"):
            d["center"] = self.center.tolist()
        if self.kind == "ball":
            d["radius"] = self.radius
        if self.kind == "box":
            d["lo"], d["hi"] = self.lo.tolist(), self.hi.tolist()
        return d


@dataclass
class Scenario:
    """Convex deferred-decision problem data.

    ``priorities`` lists target indices (0-based) from highest to lowest
    priority.  Input constraints are all optional:
    ``||u|| <= u_max``, ``e'u >= u_min``, ``||u|| cos(delta_max) <= e'u`` and
    ``u_lo <= u <= u_hi``; the cumulative cost is ``sum ||u_k||^2 <= l_max``.
    """

    system: DiscreteAffineSystem
    z0: np.ndarray
    targets: list[Target]
    horizons: list[int]
    priorities: list[int] | None = None
    u_max: float | None = None
    u_min: float | None = None
    e: np.ndarray | None = None
    delta_max_deg: float | None = None
    u_lo: np.ndarray | None = None
    u_hi: np.ndarray | None = None
    x_lo: np.ndarray | None = None
    x_hi: np.ndarray | None = None
    l_max: float | None = None
    name: str = "scenario"

    def __post_init__(self):
        self.z0 = np.asarray(self.z0, dtype=float)
        n = len(self.targets)
        if self.priorities is None:
            self.priorities = list(range(n))
        self.priorities = [int(p) for p in self.priorities]
        self.horizons = [int(h) for h in self.horizons]
        if sorted(self.priorities) != list(range(n)):
            raise ValueError("priorities must be a permutation of the target indices")
        if len(self.horizons) != n or min(self.horizons, default=2) < 2:
            raise ValueError("one horizon >= 2 per target is required")
        if self.u_max is not None and self.u_min is not None and self.u_min > self.u_max:
            raise ValueError("u_min exceeds u_max")
        if self.delta_max_deg is not None and not 0 < self.delta_max_deg < 90:
            raise ValueError("delta_max must lie strictly between 0 and 90 degrees")
        if self.e is not None:
            self.e = np.asarray(self.e, dtype=float)
            self.e = self.e / np.linalg.norm(self.e)
        for name in ("u_lo", "u_hi", "x_lo", "x_hi"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=float))
        if self.z0.shape != (self.system.n_x,):
            raise ValueError("z0 dimension does not match the system")

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    def stage_cost(self, u) -> float:
        return float(np.sum(np.asarray(u) ** 2))

    def input_ok(self, u, tol: float = 1e-6) -> bool:
        u = np.asarray(u, dtype=float)
        nu = np.linalg.norm(u)
        ok = True
        if self.u_max is not None:
            ok &= nu <= self.u_max * (1 + tol)
        if self.u_min is not None:
            ok &= self.e @ u >= self.u_min * (1 - tol)
        if self.delta_max_deg is not None:
            ok &= nu * math.cos(math.radians(self.delta_max_deg)) <= self.e @ u + tol * max(1.0, nu)
        if self.u_lo is not None:
            ok &= bool(np.all(u >= self.u_lo - tol * np.maximum(1, np.abs(self.u_lo))))
        if self.u_hi is not None:
            ok &= bool(np.all(u <= self.u_hi + tol * np.maximum(1, np.abs(self.u_hi))))
        return bool(ok)


def _scales(sc: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal state and input scalings giving O(1) scaled magnitudes."""
    mags = [np.abs(sc.z0)]
    for t in sc.targets:
        mags.append(np.abs(t.representative()))
        if t.kind == "box":
            mags += [np.abs(t.lo), np.abs(t.hi)]
    if sc.x_lo is not None:
        mags.append(np.where(np.isfinite(sc.x_lo), np.abs(sc.x_lo), 0))
    if sc.x_hi is not None:
        mags.append(np.where(np.isfinite(sc.x_hi), np.abs(sc.x_hi), 0))
    Dx = np.maximum(1.0, np.max(mags, axis=0))
    nu = sc.system.n_u
    umag = 1.0
    if sc.u_max is not None:
        umag = max(umag, sc.u_max)
    for v in (sc.u_lo, sc.u_hi):
        if v is not None:
            umag = max(umag, float(np.max(np.abs(v))))
    return Dx, np.full(nu, umag)


# --------------------------------------------------------------------------
# coincidence horizon


def coincidence_horizon(trajectories, tol: float = COINCIDENCE_TOL) -> int:
    """Largest ``k`` with all sequences agreeing (inf-norm <= tol) at times 1..k."""
    trajs = [np.atleast_2d(np.asarray(t, dtype=float)) for t in trajectories]
    if not trajs:
        raise ValueError("need at least one trajectory")
    L = min(len(t) for t in trajs)
    k = 0
    while k < L and all(np.max(np.abs(t[k] - trajs[0][k])) <= tol for t in trajs[1:]):
        k += 1
    return k


# --------------------------------------------------------------------------
# feasibility program


@dataclass
class CoincidentProgram:
    prog: conic.ConicProgram
    J: list[int]
    k_star: int
    horizons: dict[int, int]
    Dx: np.ndarray
    Du: np.ndarray
    states: dict[int, list[np.ndarray]]    # per target: index arrays (scaled vars) for x_1..x_M
    inputs: dict[int, list[np.ndarray]]    # per target: index arrays for u_1..u_{M-1}

    def extract(self, x: np.ndarray):
        """Per-target (states, inputs) in physical units."""
        out = {}
        for j in self.J:
            X = np.array([self.Dx * x[i] for i in self.states[j]])
            U = np.array([self.Du * x[i] for i in self.inputs[j]]).reshape(-1, len(self.Du))
            out[j] = (X, U)
        return out


def _add_input_rows(b: ProgramBuilder, sc: Scenario, u: np.ndarray, Du: np.ndarray) -> None:
    nu = len(Du)
    DuM = np.diag(Du)
    if sc.u_max is not None:
        b.soc([(u, np.vstack([np.zeros((1, nu)), DuM]))], np.r_[sc.u_max, np.zeros(nu)])
    if sc.u_min is not None:
        b.nonneg([(u, (sc.e * Du)[None, :])], [-sc.u_min])
    if sc.delta_max_deg is not None:
        ca = math.cos(math.radians(sc.delta_max_deg))
        b.soc([(u, np.vstack([(sc.e * Du)[None, :], ca * DuM]))], np.zeros(nu + 1))
    if sc.u_lo is not None:
        fin = np.isfinite(sc.u_lo)
        if fin.any():
            b.nonneg([(u[fin], Du[fin])], -sc.u_lo[fin])
    if sc.u_hi is not None:
        fin = np.isfinite(sc.u_hi)
        if fin.any():
            b.nonneg([(u[fin], -Du[fin])], sc.u_hi[fin])


def _add_state_rows(b: ProgramBuilder, sc: Scenario, x: np.ndarray, Dx: np.ndarray) -> None:
    if sc.x_lo is not None:
        fin = np.isfinite(sc.x_lo)
        if fin.any():
            b.nonneg([(x[fin], Dx[fin])], -sc.x_lo[fin])
    if sc.x_hi is not None:
        fin = np.isfinite(sc.x_hi)
        if fin.any():
            b.nonneg([(x[fin], -Dx[fin])], sc.x_hi[fin])


def _add_target_rows(b: ProgramBuilder, t: Target, x: np.ndarray, Dx: np.ndarray) -> None:
    if t.kind == "point":
        b.eq([(x, Dx)], -t.center)
    elif t.kind == "box":
        b.nonneg([(x, Dx)], -t.lo)
        b.nonneg([(x, -Dx)], t.hi)
    else:
        n = len(Dx)
        b.soc([(x, np.vstack([np.zeros((1, n)), np.diag(Dx)]))], np.r_[t.radius, -t.center])


def build_coincident_feasibility(J, k_star: int, horizons, z0, budget, scenario: Scenario,
                                 shared_inputs: bool = True, min_energy: bool = False) -> CoincidentProgram:
    """Convex program whose feasibility means trajectories to all of ``J`` coincide up to ``k_star``.

    ``horizons`` maps target index to its (local) horizon.  With
    ``shared_inputs`` the trunk uses one block of state and input variables;
    otherwise each target has its own trajectory and states are tied by
    equality rows for ``k <= k_star`` (inputs free).  ``budget`` of ``None``
    drops the cumulative cost row.  ``min_energy`` adds the objective
    ``sqrt(sum ||u||^2)`` over all targets, used to pick one well-defined
    solution once feasibility is settled.
    """
    J = [int(j) for j in J]
    if not J:
        raise ValueError("J must be nonempty")
    hz = {j: int(horizons[j]) for j in J}
    if not 1 <= k_star <= min(hz.values()):
        raise ValueError(f"k_star={k_star} must lie in [1, {min(hz.values())}]")
    sys_ = scenario.system
    Dx, Du = _scales(scenario)
    nx, nu = sys_.n_x, sys_.n_u
    A_hat = (sys_.A * Dx[None, :]) / Dx[:, None]
    B_hat = (sys_.B * Du[None, :]) / Dx[:, None]
    c_hat = sys_.c / Dx
    b = ProgramBuilder()
    states: dict[int, list] = {}
    inputs: dict[int, list] = {}

    def new_state(name):
        x = b.var(name, nx)
        _add_state_rows(b, scenario, x, Dx)
        return x

    def new_input(name):
        u = b.var(name, nu)
        _add_input_rows(b, scenario, u, Du)
        return u

    def dyn(x_next, x, u):
        # x+ - A x - B u - c = 0 in scaled form
        b.eq([(x_next, np.eye(nx)), (x, -A_hat), (u, -B_hat)], -c_hat)

    z0 = np.asarray(z0, dtype=float)
    if shared_inputs:
        trunk_x = [new_state("trunk_x_1")]
        b.eq([(trunk_x[0], np.eye(nx))], -z0 / Dx)
        trunk_u = []
        for k in range(1, k_star):
            trunk_u.append(new_input(f"trunk_u_{k}"))
            trunk_x.append(new_state(f"trunk_x_{k + 1}"))
            dyn(trunk_x[-1], trunk_x[-2], trunk_u[-1])
        for j in J:
            xs, us = list(trunk_x), list(trunk_u)
            for k in range(k_star, hz[j]):
                us.append(new_input(f"u{j}_{k}"))
                xs.append(new_state(f"x{j}_{k + 1}"))
                dyn(xs[-1], xs[-2], us[-1])
            states[j], inputs[j] = xs, us
    else:
        for j in J:
            xs = [new_state(f"x{j}_1")]
            b.eq([(xs[0], np.eye(nx))], -z0 / Dx)
            us = []
            for k in range(1, hz[j]):
                us.append(new_input(f"u{j}_{k}"))
                xs.append(new_state(f"x{j}_{k + 1}"))
                dyn(xs[-1], xs[-2], us[-1])
            states[j], inputs[j] = xs, us
        j0 = J[0]
        for j in J[1:]:
            for k in range(1, k_star):
                b.eq([(states[j][k], np.eye(nx)), (states[j0][k], -np.eye(nx))], np.zeros(nx))

    for j in J:
        _add_target_rows(b, scenario.targets[j], states[j][-1], Dx)
        if budget is not None and budget < 0:
            b.nonneg([], [-1.0])  # overspent budget: the constant row -1 >= 0 is infeasible
        elif budget is not None and inputs[j]:
            uidx = np.concatenate(inputs[j])
            # sum ||Du u_hat||^2 <= budget, with Du uniform
            conic.quad_cost_as_cone(b, uidx, budget / Du[0] ** 2)
    if min_energy:
        all_u = sorted({int(i) for j in J for u in inputs[j] for i in u})
        if all_u:
            t = b.var("energy")
            b.add_objective(t, 1.0)
            k = len(all_u)
            b.soc([(np.r_[t], np.r_[1.0, np.zeros(k)][:, None]),
                   (np.array(all_u), np.vstack([np.zeros((1, k)), np.eye(k)]))], np.zeros(k + 1))
    return CoincidentProgram(b.build(), J, k_star, hz, Dx, Du, states, inputs)


# --------------------------------------------------------------------------
# bisection


@dataclass
class BisectionResult:
    k: int
    transcript: list[tuple[int, str]]          # (k_star, feasibility value) in probe order
    solution: dict | None = None               # per target (X, U) at k, physical units

    def feasible_at(self, k: int) -> bool | None:
        for kk, v in self.transcript:
            if kk == k:
                return v == Feasibility.FEASIBLE.value
        return None


def _probe(J, k, horizons, z0, budget, sc, tol, backend, shared_inputs):
    cp = build_coincident_feasibility(J, k, horizons, z0, budget, sc, shared_inputs=shared_inputs)
    return conic.check_feasible(cp.prog, tol=tol, backend=backend)


def max_branch_time(J, horizons, z0, budget, scenario: Scenario, tol: float = 1e-7,
                    backend: str = "ipm", shared_inputs: bool = True, realize: bool = True) -> BisectionResult:
    """Largest ``k`` for which trajectories to every target in ``J`` can coincide up to ``k``.

    Feasible(k) is monotone in k, so the search probes k = 1, then the
    smallest horizon, then bisects.  An indeterminate probe counts as
    infeasible.  With ``realize`` the program at the answer is re-solved with
    a minimum-energy objective and the trajectories are returned.
    """
    J = [int(j) for j in J]
    hz = {j: int(horizons[j]) for j in J}
    kmax = min(hz.values())
    transcript: list[tuple[int, str]] = []

    def feas(k):
        f = _probe(J, k, hz, z0, budget, scenario, tol, backend, shared_inputs)
        transcript.append((k, f.value))
        log.debug("J=%s k=%d: %s", J, k, f.value)
        return bool(f)

    if not feas(1):
        raise AssumptionViolation(f"targets {J} are not jointly reachable from the start state")
    if len(J) == 1 or feas(kmax):
        lo = kmax
    else:
        lo, hi = 1, kmax          # feasible(lo), infeasible(hi)
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if feas(mid):
                lo = mid
            else:
                hi = mid
        if not any(k == lo + 1 for k, _ in transcript):
            feas(lo + 1)
    res = BisectionResult(lo, transcript)
    if realize:
        cp = build_coincident_feasibility(J, lo, hz, z0, budget, scenario,
                                          shared_inputs=shared_inputs, min_energy=True)
        sol = conic.solve(cp.prog, tol=min(tol, 1e-9), backend=backend)
        if not sol.optimal:
            sol = conic.solve(cp.prog.with_objective(np.zeros(cp.prog.n)), tol=tol, backend=backend)
        if not sol.optimal:
            raise BudgetExhausted(f"could not realize trajectories at k={lo} ({sol.status.value})")
        res.solution = cp.extract(sol.x)
    return res


def check_assumption(scenario: Scenario, tol: float = 1e-7, backend: str = "ipm") -> dict:
    """Single-target feasibility from ``z0`` for every target, plus their conjunction."""
    per = {}
    for j in range(scenario.n_targets):
        cp = build_coincident_feasibility([j], 1, {j: scenario.horizons[j]}, scenario.z0,
                                          scenario.l_max, scenario)
        per[j] = conic.check_feasible(cp.prog, tol=tol, backend=backend).value
    return {"per_target": per, "all_feasible": all(v == Feasibility.FEASIBLE.value for v in per.values())}


# --------------------------------------------------------------------------
# tree


@dataclass
class Segment:
    states: np.ndarray           # (len, n_x)
    inputs: np.ndarray           # (len - 1, n_u)
    start: int                   # global time index of states[0] (1-based)

    @property
    def end(self) -> int:
        return self.start + len(self.states) - 1


@dataclass
class DdtoTree:
    """Trunks shared by the retained targets plus one branch per target.

    ``branch_times`` and segment starts use the global 1-based time index.
    """

    trunks: list[Segment]
    branches: dict[int, Segment]
    branch_times: dict[int, float]
    priorities: list[int]
    meta: dict = field(default_factory=dict)

    def branch_point(self, j: int) -> np.ndarray:
        return self.branches[j].states[0]

    def full_path(self, j: int) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated (states, inputs) from the root to target ``j``."""
        kj = self.branch_times[j]
        Xs, Us = [], []
        for tr in self.trunks:
            if tr.start >= kj:
                break
            stop = min(tr.end, kj)
            Xs.append(tr.states[: stop - tr.start])
            Us.append(tr.inputs[: stop - tr.start])
        br = self.branches[j]
        Xs.append(br.states)
        Us.append(br.inputs)
        nu = br.inputs.shape[1] if br.inputs.ndim == 2 and br.inputs.size else self.meta.get("n_u", 0)
        U = np.concatenate([u.reshape(-1, nu) for u in Us]) if nu else np.zeros((0, 0))
        return np.concatenate(Xs), U

    def sum_J(self) -> int:
        """sum_k |J_k|: at each time, the number of targets whose path coincides with the
        highest-priority path."""
        anchor = self.priorities[0]
        XA, _ = self.full_path(anchor)
        total = 0
        for j in self.branches:
            Xj, _ = self.full_path(j)
            L = min(len(XA), len(Xj))
            total += coincidence_horizon([XA[:L], Xj[:L]], tol=COINCIDENCE_TOL)
        return total


def run_ddto_qcvx(scenario: Scenario, tol: float = 1e-7, backend: str = "ipm",
                  shared_inputs: bool = True) -> DdtoTree:
    """Build the full tree: reject the lowest-priority remaining target each round."""
    sc = scenario
    J = list(sc.priorities)
    pr = list(sc.priorities)
    z = sc.z0.copy()
    k_prev = 1
    budget = sc.l_max
    trunks: list[Segment] = []
    branches: dict[int, Segment] = {}
    bts: dict[int, float] = {}
    rounds = []
    if len(J) == 1:
        j = J[0]
        res = max_branch_time([j], {j: sc.horizons[j]}, z, budget, sc, tol, backend, shared_inputs)
        X, U = res.solution[j]
        X = sc.system.rollout(z, U)
        branches[j] = Segment(X, U, 1)
        bts[j] = 1
        return DdtoTree(trunks, branches, bts, pr, {"rounds": [], "n_u": sc.system.n_u})
    for r in range(len(pr) - 1):
        hz = {j: sc.horizons[j] - k_prev + 1 for j in J}
        try:
            res = max_branch_time(J, hz, z, budget, sc, tol, backend, shared_inputs)
        except AssumptionViolation as exc:
            raise BudgetExhausted(f"round {r + 1}: {exc}") from exc
        k_loc = res.k
        k_glob = k_prev + k_loc - 1
        reject = J[-1]
        sol = res.solution
        # trunk: shared prefix, re-simulated from its inputs
        _, U_all = sol[reject]
        U_tr = U_all[: k_loc - 1]
        X_tr = sc.system.rollout(z, U_tr)
        trunks.append(Segment(X_tr, U_tr, k_prev))
        bp = X_tr[-1]
        # rejected target's branch
        U_br = U_all[k_loc - 1:]
        branches[reject] = Segment(sc.system.rollout(bp, U_br), U_br, k_glob)
        bts[reject] = k_glob
        spent = float(np.sum(U_tr ** 2))
        rounds.append({"round": r + 1, "J": list(J), "k_local": k_loc, "k_global": k_glob,
                       "transcript": res.transcript, "budget": budget, "trunk_cost": spent})
        if budget is not None:
            budget = budget - spent
        J = J[:-1]
        z = bp
        k_prev = k_glob
        if len(J) == 1:
            last = J[0]
            X_l, U_l = sol[last]
            U_b = U_l[k_loc - 1:]
            branches[last] = Segment(sc.system.rollout(bp, U_b), U_b, k_glob)
            bts[last] = k_glob
    return DdtoTree(trunks, branches, bts, pr, {"rounds": rounds, "n_u": sc.system.n_u})


# --------------------------------------------------------------------------
# built-in scenario and checks


def quad_convex_scenario(**overrides) -> Scenario:
    """Convex quadrotor example with four landing sites."""
    dt = overrides.pop("dt", 0.5)
    a = overrides.pop("a", (0.0, 0.0, -9.806))
    kw = dict(
        system=None, z0=np.array([0, 0, 30, 0, 0, 0.0]),
        targets=[Target.point([39.5, -6.25, 0, 0, 0, 0]), Target.point([39.5, 6.25, 0, 0, 0, 0]),
                 Target.point([28.3, 28.3, 0, 0, 0, 0]), Target.point([40, 0, 0, 0, 0, 0])],
        horizons=[20] * 4, priorities=[0, 1, 2, 3], u_max=20.0, u_min=8.0, e=np.array([0, 0, 1.0]),
        delta_max_deg=60.0, l_max=3794.0, name="quad_convex")
    kw.update(overrides)
    kw["system"] = kw["system"] or double_integrator_discrete(dt, a)
    return Scenario(**kw)


def tree_report(tree: DdtoTree, sc: Scenario) -> dict:
    """Invariant measurements for a discrete tree."""
    out = {"dynamics_defect": 0.0, "terminal_error": {}, "cost": {}, "thrust_min": np.inf,
           "thrust_max": 0.0, "pointing_max_deg": 0.0, "inputs_ok": True}
    for j in tree.branches:
        X, U = tree.full_path(j)
        for k in range(len(U)):
            d = np.max(np.abs(X[k + 1] - sc.system.step(X[k], U[k])))
            out["dynamics_defect"] = max(out["dynamics_defect"], float(d))
            nu = float(np.linalg.norm(U[k]))
            out["thrust_min"] = min(out["thrust_min"], nu)
            out["thrust_max"] = max(out["thrust_max"], nu)
            if sc.e is not None and nu > 0:
                ang = math.degrees(math.acos(np.clip(sc.e @ U[k] / nu, -1, 1)))
                out["pointing_max_deg"] = max(out["pointing_max_deg"], ang)
            out["inputs_ok"] &= sc.input_ok(U[k])
        out["terminal_error"][j] = sc.targets[j].distance(X[-1])
        out["cost"][j] = float(np.sum(U ** 2))
        out.setdefault("length", {})[j] = len(X)
    return out


def scenario_from_grid(grid) -> Scenario:
    """Continuous counterpart of an integrator grid instance (box inputs and states, point targets)."""
    emb = grid.embedding or {}
    if emb.get("kind") != "integrator":
        raise ValueError("grid instance has no integrator embedding")
    d = len(grid.z0)
    sys_ = DiscreteAffineSystem(np.eye(d), np.eye(d), np.zeros(d))
    targets = []
    for T in grid.targets:
        if len(T) != 1:
            raise ValueError("only singleton targets embed as points")
        targets.append(Target.point(np.array(next(iter(T)), dtype=float)))
    ub = float(emb["u_bound"])
    return Scenario(sys_, np.array(grid.z0, dtype=float), targets, [grid.N] * len(targets),
                    u_lo=np.full(d, -ub), u_hi=np.full(d, ub), x_lo=np.full(d, float(emb["lo"])),
                    x_hi=np.full(d, float(emb["hi"])), name="grid")


def compare_with_oracle(grid, tol: float = 1e-7, backend: str = "ipm") -> list[dict]:
    """Bisection branch time versus the reach-set oracle for every target subset of a grid instance.

    Each row records both values and whether the transcript brackets the
    answer: feasible at ``k`` and (``k`` is the horizon or infeasible at ``k + 1``).
    Singletons are answered without probing beyond ``k = 1``.
    """
    from . import oracle

    sc = scenario_from_grid(grid)
    n = grid.n_targets
    rows = []
    for J in (c for r in range(1, n + 1) for c in itertools.combinations(range(n), r)):
        try:
            ref = oracle.branch_time_oracle(grid, J)
        except oracle.UndefinedBranchTime:
            ref = None
        try:
            res = max_branch_time(list(J), sc.horizons, sc.z0, None, sc, tol, backend, realize=False)
            k = res.k
            kmax = min(sc.horizons[j] for j in J)
            if len(J) == 1:
                # a lone target coincides with itself over its whole horizon
                bracket = bool(res.feasible_at(1)) and k == kmax
            else:
                bracket = bool(res.feasible_at(k)) and (k == kmax or res.feasible_at(k + 1) is False)
            transcript = res.transcript
        except AssumptionViolation:
            k, bracket, transcript = None, True, []
        rows.append({"J": list(J), "qcvx": k, "oracle": ref, "bracketed": bracket,
                     "agree": k == ref and bracket, "transcript": transcript})
    return rows
