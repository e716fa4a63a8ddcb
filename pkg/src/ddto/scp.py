"""Deferred-decision planning for continuous-time nonlinear systems.

Each round solves one trunk plus one branch per retained target in
normalized time ``tau in [0, 1]``.  Physical time is recovered from the
dilation input ``s`` and path constraints are folded into the integral
state ``y`` whose per-interval growth is capped by ``eps``.  The nonconvex
program is solved by a prox-linear loop: linearize the multiple-shooting
map, add l1-penalized defects, a quadratic trust region, and solve the
resulting second-order cone program.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .conic import ProgramBuilder, solve
from .model import (ContinuousSystem, PropagationError, augmented_ct_field, quadrotor_system,
                    rk4, scale_constraints, shooting_with_jacobians)

log = logging.getLogger(__name__)

NX, NU = 7, 3          # quadrotor state (r, v, theta) and thrust
NXA, NUA = NX + 2, NU + 1


class SizingError(ValueError):
    """Horizon length incompatible with the halving schedule."""


class InvalidDilation(ValueError):
    """A dilation factor is not strictly positive."""


class ScpRoundError(RuntimeError):
    """A round of the recursion failed to converge."""

    def __init__(self, round_index: int, result: "ScpResult"):
        self.round_index = round_index
        self.result = result
        super().__init__(f"round {round_index}: {_residual_text(result)}")


def _residual_text(result: "ScpResult") -> str:
    last = result.trace[-1] if result.trace else {}
    return (f"no convergence after {len(result.trace)} iterations "
            f"(defect {last.get('defect', math.nan):.3g}, step {last.get('step', math.nan):.3g}, "
            f"terminal {last.get('terminal', math.nan):.3g})")


@dataclass
class ScpConfig:
    """Prox-linear loop settings; norms are measured in scaled units."""

    w_tr: float = 0.1
    w_tr_decay: float = 0.9
    w_tr_min: float = 1e-3
    w_tr_max: float = 1e6
    w_tr_growth: float = 2.0
    rho_reject: float = 0.1
    rho_good: float = 0.7
    stall_tol: float = 1e-4
    stall_count: int = 3
    stall_defect: float = 1e-4
    diverge_factor: float = 100.0
    diverge_floor: float = 1.0
    w_pen: float = 1e3
    max_iter: int = 150
    conv_tol: float = 1e-5
    defect_tol: float = 1e-6
    eps: float = 1e-5
    s_min: float = 1.0
    s_max: float = 15.0
    u_box: float = 20.0
    substeps: int = 10
    y_scale: float = 1.0
    node_constraints: bool = True
    solver_tol: float = 1e-8
    backend: str = "ipm"
    seed: int | None = None
    perturb: float = 0.0

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive; an equality on the integral state violates constraint qualifications")
        if not (self.w_tr > 0 and self.w_pen > 0):
            raise ValueError("w_tr and w_pen must be positive")
        if not 0 < self.s_min <= self.s_max:
            raise ValueError("need 0 < s_min <= s_max")
        if self.u_box <= 0 or self.substeps < 1 or self.max_iter < 1:
            raise ValueError("u_box, substeps and max_iter must be positive")
        if not (self.diverge_factor > 1 and self.diverge_floor > 0):
            raise ValueError("need diverge_factor > 1 and diverge_floor > 0")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class NonconvexScenario:
    """Quadrotor problem with ellipsoidal keep-out zones and a thrust budget.

    ``z0`` is ``(r, v, theta)``; targets are ``(r, v)``.  ``priorities`` are
    0-based target indices, highest first.  ``constraint_weights`` multiply the
    path-constraint functions (order as in :func:`quadrotor_system`) before
    they enter the violation integral.
    """

    z0: np.ndarray
    targets: list[np.ndarray]
    N: int
    l_max: float
    a: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.806]))
    c_d: float = 0.0
    v_max: float = 8.0
    u_max: float = 20.0
    u_min: float = 5.0
    e: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    delta_max_deg: float = 60.0
    obstacles: list = field(default_factory=list)
    priorities: list[int] | None = None
    constraint_weights: np.ndarray | None = None
    name: str = "scenario"

    def __post_init__(self):
        self.z0 = np.asarray(self.z0, dtype=float)
        if self.z0.shape == (6,):
            self.z0 = np.append(self.z0, 0.0)
        self.targets = [np.asarray(t, dtype=float) for t in self.targets]
        self.a = np.asarray(self.a, dtype=float)
        self.e = np.asarray(self.e, dtype=float)
        self.obstacles = [(np.asarray(H, dtype=float), np.asarray(q, dtype=float)) for H, q in self.obstacles]
        n = len(self.targets)
        if self.priorities is None:
            self.priorities = list(range(n))
        self.priorities = [int(p) for p in self.priorities]
        if sorted(self.priorities) != list(range(n)):
            raise ValueError("priorities must be a permutation of the target indices")
        if self.z0.shape != (NX,) or any(t.shape != (6,) for t in self.targets):
            raise ValueError("z0 must have 7 components and targets 6")
        if self.u_min > self.u_max:
            raise ValueError("u_min exceeds u_max")
        if self.constraint_weights is None:
            self.constraint_weights = default_constraint_weights(self)
        self.constraint_weights = np.asarray(self.constraint_weights, dtype=float)
        if self.constraint_weights.shape != (len(self.obstacles) + 5,):
            raise ValueError("one constraint weight per path constraint is required")

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    def raw_system(self) -> ContinuousSystem:
        return quadrotor_system(self.c_d, self.a, self.v_max, self.u_max, self.u_min,
                                self.delta_max_deg, self.e, self.obstacles)

    def system(self) -> ContinuousSystem:
        return scale_constraints(self.raw_system(), self.constraint_weights)


def default_constraint_weights(sc: NonconvexScenario, gain: float = 30.0) -> np.ndarray:
    """Make each path constraint dimensionless (order-one at the bound), then amplify.

    The amplification tightens the pointwise bound implied by the per-interval
    budget ``eps`` without changing the feasible set.
    """
    w = [1.0] * len(sc.obstacles)
    w += [1.0 / sc.v_max ** 2, 1.0 / sc.u_max ** 2, 1.0 / max(sc.u_min, 1.0) ** 2,
          1.0 / sc.u_max ** 2, 1.0 / sc.u_max]
    return gain * np.array(w)


def quad_nonconvex_scenario(**overrides) -> NonconvexScenario:
    """Quadrotor example with drag, two ellipsoidal obstacles, and four targets."""
    kw = dict(
        z0=np.array([10.0, -10, 10, 0, 0, 0, 0]),
        targets=[np.array([10.0, 30, 10, 1, 0, 0]), np.array([-10.0, 35, 10, 0, 1, 0]),
                 np.array([-30.0, 15, 10, 0, 0, 0]), np.array([-15.0, -15, 10, 0, 1, 0])],
        N=23, l_max=1100.0, a=np.array([0, 0, -9.806]), c_d=0.01, v_max=8.0, u_max=20.0, u_min=5.0,
        e=np.array([0, 0, 1.0]), delta_max_deg=60.0,
        obstacles=[(np.diag([0.2, 0.1, 0.2]), np.array([-5.0, 1, 10])),
                   (np.diag([0.1, 0.2, 0.2]), np.array([-10.0, 20, 10]))],
        priorities=[0, 1, 2, 3], name="quad_nonconvex")
    kw.update(overrides)
    return NonconvexScenario(**kw)


# --------------------------------------------------------------------------
# iterate, scaling, linearization


@dataclass
class ScpIterate:
    """Node values for the trunk (block 0, if present) and one block per target.

    ``X[p]`` has shape ``(M, 9)`` = ``(r, v, theta, y, t)`` and ``U[p]`` has
    shape ``(M - 1, 4)`` = ``(u, s)`` under zero-order hold.
    """

    J: list[int]
    has_trunk: bool
    X: list[np.ndarray]
    U: list[np.ndarray]
    penalty: float = math.nan
    defect: float = math.nan
    terminal: float = math.nan
    defects: list[np.ndarray] | None = None
    linearized: bool = False

    def __post_init__(self):
        P = len(self.J) + int(self.has_trunk)
        if len(self.X) != P or len(self.U) != P:
            raise ValueError("one state and input block per trajectory is required")
        M = self.X[0].shape[0]
        for X, U in zip(self.X, self.U):
            if X.shape != (M, NXA) or U.shape != (M - 1, NUA):
                raise ValueError("inconsistent block dimensions")

    @property
    def M(self) -> int:
        return self.X[0].shape[0]

    def block(self, j: int) -> int:
        return self.J.index(j) + int(self.has_trunk)

    def trunk_time(self) -> float:
        return float(self.X[0][-1, -1]) if self.has_trunk else 0.0


def state_scale(sc: NonconvexScenario, cfg: ScpConfig) -> np.ndarray:
    pos = [sc.z0[:3]] + [t[:3] for t in sc.targets]
    r = max(1.0, float(np.max(np.abs(pos))))
    return np.array([r] * 3 + [sc.v_max] * 3 + [sc.l_max, cfg.y_scale, cfg.s_max])


def input_scale(cfg: ScpConfig) -> np.ndarray:
    return np.array([cfg.u_box] * 3 + [cfg.s_max])


def linearize_step(sys: ContinuousSystem, xt, ut, dtau: float, substeps: int = 10):
    """Value and Jacobians of the shooting map over one normalized interval (batched)."""
    x, Phi, Gam = shooting_with_jacobians(sys, xt, ut, substeps, dtau)
    return x, Phi, Gam


def propagate(sys: ContinuousSystem, it: ScpIterate, substeps: int):
    """Shooting map applied at every interval of every block: returns ``(M-1, 9)`` per block."""
    dtau = 1.0 / (it.M - 1)
    xt = np.concatenate([X[:-1] for X in it.X])
    ut = np.concatenate(it.U)
    out = rk4(lambda z: augmented_ct_field(sys, z, ut), xt, dtau, substeps)
    return np.split(out, len(it.X))


def defects(sys, it: ScpIterate, Dx, substeps: int) -> list[np.ndarray]:
    nxt = propagate(sys, it, substeps)
    return [(X[1:] - F) / Dx for X, F in zip(it.X, nxt)]


# --------------------------------------------------------------------------
# subproblem


@dataclass
class Subproblem:
    program: object
    X: list[np.ndarray]
    U: list[np.ndarray]
    slack: list[np.ndarray]
    term: list[np.ndarray]


def build_scp_subproblem(it: ScpIterate, cfg: ScpConfig, sc: NonconvexScenario, z0, w_tr: float,
                         lin=None) -> Subproblem:
    """Convexification of the round's program about ``it`` in scaled variables.

    ``lin`` is the ``(f, Phi, Gamma)`` linearization, stacked over blocks and
    intervals; it is computed when omitted.
    """
    sys = sc.system()
    Dx, Du = state_scale(sc, cfg), input_scale(cfg)
    M, P = it.M, len(it.X)
    dtau = 1.0 / (M - 1)
    if lin is None:
        lin = linearize_step(sys, np.concatenate([X[:-1] for X in it.X]), np.concatenate(it.U), dtau, cfg.substeps)
    f, Phi, Gam = lin
    iDx = 1.0 / Dx
    Phi_s = iDx[:, None] * Phi * Dx[None, :]
    Gam_s = iDx[:, None] * Gam * Du[None, :]
    Xr = np.concatenate([X[:-1] for X in it.X])
    Ur = np.concatenate(it.U)
    aff = (f - np.einsum("bij,bj->bi", Phi, Xr) - np.einsum("bij,bj->bi", Gam, Ur)) * iDx

    b = ProgramBuilder()
    Xv = [b.var(f"X{p}", (M, NXA)) for p in range(P)]
    Uv = [b.var(f"U{p}", (M - 1, NUA)) for p in range(P)]
    Sp = [b.var(f"nu_plus{p}", (M - 1, NXA)) for p in range(P)]
    Sm = [b.var(f"nu_minus{p}", (M - 1, NXA)) for p in range(P)]
    I = np.eye(NXA)
    for p in range(P):
        for k in range(M - 1):
            r = p * (M - 1) + k
            b.eq([(Xv[p][k + 1], I), (Xv[p][k], -Phi_s[r]), (Uv[p][k], -Gam_s[r]),
                  (Sp[p][k], -I), (Sm[p][k], I)], -aff[r])
        b.nonneg([(Sp[p].ravel(), 1.0)], np.zeros(Sp[p].size))
        b.nonneg([(Sm[p].ravel(), 1.0)], np.zeros(Sm[p].size))
        b.add_objective(Sp[p].ravel(), cfg.w_pen)
        b.add_objective(Sm[p].ravel(), cfg.w_pen)
        # integral-state growth per interval
        b.nonneg([(Xv[p][1:, NX], -1.0), (Xv[p][:-1, NX], 1.0)], np.full(M - 1, cfg.eps / Dx[NX]))
        # input set: box on thrust, interval on dilation
        uu = Uv[p][:, :NU].ravel()
        b.nonneg([(uu, 1.0)], np.full(uu.size, cfg.u_box / Du[0]))
        b.nonneg([(uu, -1.0)], np.full(uu.size, cfg.u_box / Du[0]))
        b.nonneg([(Uv[p][:, NU], 1.0)], np.full(M - 1, -cfg.s_min / Du[NU]))
        b.nonneg([(Uv[p][:, NU], -1.0)], np.full(M - 1, cfg.s_max / Du[NU]))
    # boundary conditions
    z0 = np.asarray(z0, dtype=float)
    start = np.concatenate([z0, [0.0, 0.0]]) * iDx
    b.eq([(Xv[0][0], 1.0)], -start)
    off = int(it.has_trunk)
    if it.has_trunk:
        for p in range(1, P):
            b.eq([(Xv[p][0, :NX], 1.0), (Xv[0][-1, :NX], -1.0)], np.zeros(NX))
            b.eq([(Xv[p][0, NX:], 1.0)], np.zeros(2))
    Tp, Tm = [], []
    for q, j in enumerate(it.J):
        p = q + off
        tp, tm = b.var(f"term_plus{p}", 6), b.var(f"term_minus{p}", 6)
        Tp.append(tp)
        Tm.append(tm)
        b.eq([(Xv[p][-1, :6], 1.0), (tp, -1.0), (tm, 1.0)], -sc.targets[j] * iDx[:6])
        b.nonneg([(tp, 1.0)], np.zeros(6))
        b.nonneg([(tm, 1.0)], np.zeros(6))
        b.add_objective(tp, cfg.w_pen)
        b.add_objective(tm, cfg.w_pen)
        b.nonneg([(Xv[p][-1, NX - 1], -1.0)], [sc.l_max * iDx[NX - 1]])
    # trust region, one rotated cone per node
    for p in range(P):
        xs, us = it.X[p] * iDx, it.U[p] / Du
        eta = b.var(f"eta{p}", M)
        b.add_objective(eta, w_tr)
        for k in range(M):
            n_in = NXA + (NUA if k < M - 1 else 0)
            ce = np.zeros((2 + n_in, 1))
            ce[:2] = 1.0
            Cx = np.zeros((2 + n_in, NXA))
            Cx[2:2 + NXA] = 2 * np.eye(NXA)
            terms = [(eta[k], ce), (Xv[p][k], Cx)]
            const = [[1.0, -1.0], -2 * xs[k]]
            if k < M - 1:
                Cu = np.zeros((2 + n_in, NUA))
                Cu[2 + NXA:] = 2 * np.eye(NUA)
                terms.append((Uv[p][k], Cu))
                const.append(-2 * us[k])
            b.soc(terms, np.concatenate(const))
    obs = []
    if cfg.node_constraints:
        obs = _add_node_constraints(b, it, sc, cfg, Xv, Uv, Dx, Du)
    if it.has_trunk:
        b.add_objective(Xv[0][-1, NX + 1], -1.0)
    return Subproblem(b.build(), Xv, Uv, [np.stack([a, c]) for a, c in zip(Sp, Sm)],
                      [np.stack([a, c]) for a, c in zip(Tp, Tm)] + obs)


def _add_node_constraints(b: ProgramBuilder, it: ScpIterate, sc: NonconvexScenario, cfg: ScpConfig,
                          Xv, Uv, Dx, Du) -> list:
    """Path constraints imposed at the nodes, where the integral state is blind.

    Under zero-order hold the input constraints hold on the whole interval
    once they hold at the node, so thrust and pointing are exact cones.  The
    lower thrust bound is linearized (an inner approximation) and obstacles
    are linearized with penalized slacks.  Speed is a node cone.
    """
    e = sc.e / np.linalg.norm(sc.e)
    cos_d = math.cos(math.radians(sc.delta_max_deg))
    su, sv, sr = Du[0], Dx[3], Dx[0]
    slacks = []
    for p, (X, U) in enumerate(zip(it.X, it.U)):
        for k in range(U.shape[0]):
            ui = Uv[p][k, :NU]
            b.soc([(ui, np.vstack([np.zeros((1, NU)), np.eye(NU)]))], np.concatenate([[sc.u_max / su], np.zeros(NU)]))
            b.soc([(ui, np.vstack([e[None, :] / cos_d, np.eye(NU)]))], np.zeros(NU + 1))
            ub = U[k, :NU]
            nb = np.linalg.norm(ub)
            if nb > 0:
                b.nonneg([(ui, (ub / nb * su)[None, :])], [-sc.u_min])
        for k in range(1, X.shape[0]):
            b.soc([(Xv[p][k, 3:6], np.vstack([np.zeros((1, 3)), np.eye(3)]))],
                  np.concatenate([[sc.v_max / sv], np.zeros(3)]))
        if sc.obstacles:
            sig = b.var(f"obs{p}", (X.shape[0], len(sc.obstacles)))
            b.nonneg([(sig.ravel(), 1.0)], np.zeros(sig.size))
            b.add_objective(sig.ravel(), cfg.w_pen)
            for k in range(X.shape[0]):
                r = X[k, :3]
                for i, (H, q) in enumerate(sc.obstacles):
                    d = H @ (r - q)
                    g0 = 1.0 - d @ d
                    grad = -2.0 * H.T @ d
                    # sigma - g0 - grad'(r - rbar) >= 0
                    b.nonneg([(sig[k, i], 1.0), (Xv[p][k, :3], (-grad * sr)[None, :])], [-g0 + grad @ r])
            slacks.append(sig)
    return slacks


# --------------------------------------------------------------------------
# loop


@dataclass
class ScpResult:
    iterate: ScpIterate
    converged: bool
    trace: list[dict]

    def export_trace(self, path) -> None:
        write_trace(self.trace, path)


TRACE_FIELDS = ["iteration", "penalty", "defect", "terminal", "step", "trunk_time", "w_tr", "rho", "accepted",
                "guarded", "solver_status", "solver_iterations"]


def write_trace(trace: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in trace:
            w.writerow(row)


def _straight(a, b, M):
    lam = np.linspace(0.0, 1.0, M)[:, None]
    return (1 - lam) * a + lam * b


def _guess_time(sc: NonconvexScenario, p0, p1, cfg: ScpConfig) -> float:
    d = float(np.linalg.norm(np.asarray(p1) - np.asarray(p0)))
    return float(np.clip(d / (0.5 * sc.v_max), cfg.s_min, cfg.s_max))


def _block_guess(sc, cfg, x_start, rv_end, M):
    """Straight line in (r, v), hover thrust, hover cost, constant dilation."""
    T = _guess_time(sc, x_start[:3], rv_end[:3], cfg)
    X = np.zeros((M, NXA))
    X[:, :6] = _straight(x_start[:6], rv_end, M)
    hover = -sc.a
    t = np.linspace(0.0, T, M)
    X[:, 6] = x_start[6] + float(hover @ hover) * t
    X[:, 8] = t
    U = np.zeros((M - 1, NUA))
    U[:, :NU] = np.clip(hover, -cfg.u_box, cfg.u_box)
    U[:, NU] = T
    return X, U


def initial_guess(sc: NonconvexScenario, J, z0, M: int, cfg: ScpConfig, has_trunk: bool = True) -> ScpIterate:
    """Trunk toward the centroid of the retained targets, then straight branches."""
    z0 = np.asarray(z0, dtype=float)
    Xs, Us = [], []
    if has_trunk:
        cen = np.mean([sc.targets[j] for j in J], axis=0)
        mid = np.concatenate([0.5 * (z0[:3] + cen[:3]), np.zeros(3)])
        X0, U0 = _block_guess(sc, cfg, z0, mid, M)
        Xs.append(X0)
        Us.append(U0)
        bp = X0[-1, :NX]
    else:
        bp = z0
    for j in J:
        X, U = _block_guess(sc, cfg, bp, sc.targets[j], M)
        Xs.append(X)
        Us.append(U)
    if cfg.perturb > 0:
        rng = np.random.default_rng(cfg.seed)
        Dx = state_scale(sc, cfg)
        for X in Xs:
            X[1:, :6] += cfg.perturb * Dx[:6] * rng.standard_normal(X[1:, :6].shape)
    return ScpIterate(list(J), has_trunk, Xs, Us)


def _terminal_residual(it: ScpIterate, sc: NonconvexScenario, Dx) -> tuple[float, float]:
    """(max, l1) of the scaled terminal equality residuals and budget excess."""
    mx, l1 = 0.0, 0.0
    for j in it.J:
        X = it.X[it.block(j)]
        r = np.abs(X[-1, :6] - sc.targets[j]) / Dx[:6]
        over = max(0.0, (X[-1, 6] - sc.l_max) / Dx[6])
        mx = max(mx, float(np.max(r)), over)
        l1 += float(np.sum(r)) + over
    return mx, l1


def _node_obstacle_violation(it: ScpIterate, sc: NonconvexScenario) -> float:
    tot = 0.0
    for X in it.X:
        for H, q in sc.obstacles:
            d = (X[:, :3] - q) @ H.T
            tot += float(np.sum(np.maximum(0.0, 1.0 - np.sum(d * d, axis=1))))
    return tot


def _evaluate(sys, it: ScpIterate, sc, cfg, Dx) -> float:
    """Fill defect bookkeeping on ``it`` and return the exact-penalty merit."""
    d = defects(sys, it, Dx, cfg.substeps)
    term_max, term_l1 = _terminal_residual(it, sc, Dx)
    it.defects = d
    it.defect = max(float(np.max(np.abs(v))) for v in d)
    it.penalty = float(sum(np.sum(np.abs(v)) for v in d)) + term_l1
    if cfg.node_constraints:
        it.penalty += _node_obstacle_violation(it, sc)
    it.terminal = term_max
    return -it.trunk_time() / Dx[-1] + cfg.w_pen * it.penalty


def scp_solve(sc: NonconvexScenario, J, z0, M: int, cfg: ScpConfig | None = None,
              init: ScpIterate | None = None, has_trunk: bool | None = None) -> ScpResult:
    """Penalized prox-linear iterations for one round.

    Two phases.  First every solved subproblem is accepted with a fixed
    trust-region weight, which moves quickly toward the optimum.  Once the
    trunk time stops moving (change below ``stall_tol`` in scaled units, with
    defects below ``stall_defect``, for ``stall_count`` consecutive steps), or
    as soon as the defect exceeds ``diverge_factor`` times the best defect of
    the round so far (floored at ``diverge_floor``), a step is accepted only
    when the exact-penalty merit decreases by at least ``rho_reject`` of the
    decrease the convex model predicted.  Accepted steps with ratio above
    ``rho_good`` relax the weight by ``w_tr_decay``; rejected steps multiply it
    by ``w_tr_growth`` and re-solve the same model.
    """
    cfg = cfg or ScpConfig()
    if M < 2:
        raise SizingError("at least two nodes per trajectory are required")
    J = list(J)
    if has_trunk is None:
        has_trunk = len(J) > 1
    sys = sc.system()
    Dx, Du = state_scale(sc, cfg), input_scale(cfg)
    it = init or initial_guess(sc, J, z0, M, cfg, has_trunk)
    dtau = 1.0 / (M - 1)
    trace: list[dict] = []
    w_tr = cfg.w_tr
    merit = _evaluate(sys, it, sc, cfg, Dx)
    lin = None
    guarded = False
    stalled = 0
    best_defect = math.inf
    for n in range(1, cfg.max_iter + 1):
        if lin is None:
            lin = linearize_step(sys, np.concatenate([X[:-1] for X in it.X]), np.concatenate(it.U), dtau,
                                 cfg.substeps)
            it.linearized = True
        sub = build_scp_subproblem(it, cfg, sc, z0, w_tr, lin)
        res = solve(sub.program, tol=cfg.solver_tol, backend=cfg.backend)
        row = {"iteration": n, "w_tr": w_tr, "solver_status": res.status.value,
               "solver_iterations": res.iterations}
        if res.x is None:
            row.update(penalty=float(it.penalty), defect=float(it.defect), terminal=float(it.terminal),
                       step=math.nan, trunk_time=float(it.trunk_time()), rho=math.nan, accepted=False,
                       guarded=guarded)
            trace.append(row)
            log.warning("subproblem %d returned %s", n, res.status.value)
            break
        Xn = [res.x[v] * Dx for v in sub.X]
        Un = [res.x[v] * Du for v in sub.U]
        step = max(max(float(np.max(np.abs((a - b) / Dx))) for a, b in zip(Xn, it.X)),
                   max(float(np.max(np.abs((a - b) / Du))) for a, b in zip(Un, it.U)))
        slack = float(sum(np.sum(res.x[v]) for v in sub.slack) + sum(np.sum(res.x[v]) for v in sub.term))
        t_new = float(res.x[sub.X[0][-1, -1]]) if has_trunk else 0.0
        model = -t_new + cfg.w_pen * slack
        new = ScpIterate(J, has_trunk, Xn, Un)
        try:
            merit_new = _evaluate(sys, new, sc, cfg, Dx)
        except PropagationError:
            merit_new = math.inf
        predicted = merit - model
        actual = merit - merit_new
        rho = actual / predicted if predicted > 0 else (1.0 if actual >= 0 else -math.inf)
        if not guarded:
            gain = (new.trunk_time() - it.trunk_time()) / Dx[-1]
            quiet = abs(gain) < cfg.stall_tol and new.defect <= cfg.stall_defect
            stalled = stalled + 1 if quiet else 0
            guarded = stalled >= cfg.stall_count
            diverging = new.defect > cfg.diverge_factor * max(best_defect, cfg.diverge_floor)
            best_defect = min(best_defect, new.defect)
            if diverging:
                log.info("scp %d: defect %.3g is diverging, switching to guarded steps", n, new.defect)
                guarded = True
            accepted = bool(rho >= cfg.rho_reject) if diverging else True
        else:
            accepted = bool(rho >= cfg.rho_reject)
        row.update(penalty=float(new.penalty), defect=float(new.defect), terminal=float(new.terminal), step=step,
                   trunk_time=float(new.trunk_time()), rho=float(rho), accepted=accepted, guarded=guarded)
        trace.append(row)
        log.debug("scp %3d  step %.2e  defect %.2e  term %.2e  t0 %.4f  rho %.3f  w_tr %.3g",
                  n, step, new.defect, new.terminal, new.trunk_time(), rho, w_tr)
        if step <= cfg.conv_tol:
            # the model sees no further progress; stop at whichever point is feasible
            best = new if accepted else it
            ok = best.defect <= cfg.defect_tol and best.terminal <= cfg.defect_tol
            if ok:
                return ScpResult(best, True, trace)
        if accepted:
            it, merit, lin = new, merit_new, None
            if guarded and rho >= cfg.rho_good:
                w_tr = max(cfg.w_tr_min, w_tr * cfg.w_tr_decay)
        else:
            w_tr = min(cfg.w_tr_max, w_tr * cfg.w_tr_growth)
    return ScpResult(it, False, trace)


# --------------------------------------------------------------------------
# time reconstruction and validation


@dataclass
class TimeMap:
    """Piecewise-linear bijection between normalized and physical time."""

    tau: np.ndarray
    t: np.ndarray

    @property
    def t_final(self) -> float:
        return float(self.t[-1])

    def to_physical(self, tau):
        return np.interp(tau, self.tau, self.t)

    def to_normalized(self, t):
        return np.interp(t, self.t, self.tau)

    def resample(self, values, t_grid) -> np.ndarray:
        """Linear interpolation of node values on a physical-time grid."""
        values = np.asarray(values, dtype=float)
        t_grid = np.asarray(t_grid, dtype=float)
        if values.ndim == 1:
            return np.interp(t_grid, self.t, values)
        return np.stack([np.interp(t_grid, self.t, values[:, i]) for i in range(values.shape[1])], axis=1)


def reconstruct_time(X=None, U=None, s=None) -> TimeMap:
    """Time map from the dilation sequence (``U[:, -1]`` or ``s``) on a uniform grid."""
    if s is None:
        s = np.asarray(U, dtype=float)[:, -1]
    s = np.asarray(s, dtype=float)
    if s.size == 0 or np.any(~(s > 0)):
        raise InvalidDilation("dilation factors must be positive")
    K = s.size
    tau = np.linspace(0.0, 1.0, K + 1)
    t = np.concatenate([[0.0], np.cumsum(s) / K])
    return TimeMap(tau, t)


@dataclass
class ScpSegment:
    """Augmented node values of one trunk or branch piece, starting at physical time ``t0``."""

    aug_states: np.ndarray
    aug_inputs: np.ndarray
    t0: float

    @property
    def states(self) -> np.ndarray:
        return self.aug_states[:, :NX]

    @property
    def inputs(self) -> np.ndarray:
        return self.aug_inputs[:, :NU]

    @property
    def dilation(self) -> np.ndarray:
        return self.aug_inputs[:, NU]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + reconstruct_time(s=self.dilation).t

    @property
    def t1(self) -> float:
        return float(self.times[-1])

    def to_dict(self) -> dict:
        return {"t0": self.t0, "aug_states": self.aug_states.tolist(), "aug_inputs": self.aug_inputs.tolist()}

    @classmethod
    def from_dict(cls, d) -> "ScpSegment":
        return cls(np.array(d["aug_states"], dtype=float).reshape(-1, NXA),
                   np.array(d["aug_inputs"], dtype=float).reshape(-1, NUA), float(d["t0"]))


@dataclass
class ScpTree:
    """Continuous-time tree: ``branch_times[j]`` is the physical time where target ``j`` departs."""

    trunks: list[ScpSegment]
    branches: dict[int, ScpSegment]
    branch_times: dict[int, float]
    priorities: list[int]
    meta: dict = field(default_factory=dict)

    def segments(self, j: int) -> list[ScpSegment]:
        tb = self.branch_times[j]
        return [tr for tr in self.trunks if tr.t0 < tb] + [self.branches[j]]

    def full_path(self, j: int):
        """(times, states, inputs, dilation) at nodes from the root to target ``j``."""
        segs = self.segments(j)
        T, X, U, S = [], [], [], []
        for i, sg in enumerate(segs):
            cut = 0 if i == 0 else 1
            T.append(sg.times[cut:])
            X.append(sg.states[cut:])
            U.append(sg.inputs)
            S.append(sg.dilation)
        return np.concatenate(T), np.concatenate(X), np.concatenate(U), np.concatenate(S)


def _dense_segment(sys: ContinuousSystem, seg: ScpSegment, samples: int):
    """Per-interval RK4 from each node; returns sample states, inputs and times (interval endpoints included)."""
    M = seg.aug_states.shape[0]
    dtau = 1.0 / (M - 1)
    x = seg.aug_states[:-1].copy()
    u = seg.aug_inputs
    h = dtau / samples
    Xs = [x.copy()]
    f = lambda z: augmented_ct_field(sys, z, u)
    for i in range(samples):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        Xs.append(x.copy())
    return np.stack(Xs, axis=1), u


def validate_continuous(tree: ScpTree, sc: NonconvexScenario, samples_per_interval: int = 50,
                        eps: float | None = None) -> dict:
    """Dense re-integration of every segment with pointwise path-constraint checks.

    Constraint values are reported in physical units on the unweighted
    system.  The integral state is propagated with the weighted system that
    the solver used, so its growth can be compared to ``eps``.
    """
    raw, wsys = sc.raw_system(), sc.system()
    n_obs = len(sc.obstacles)
    rep = {"max_violation": np.zeros(raw.n_g).tolist(), "obstacle_margin": math.inf, "speed_max": 0.0,
           "thrust_min": math.inf, "thrust_max": 0.0, "pointing_max_deg": 0.0, "y_increment_max": 0.0,
           "dilation_min": math.inf, "dilation_max": 0.0, "node_mismatch": 0.0, "cost": {},
           "terminal_error": {}}
    viol = np.zeros(raw.n_g)
    segs = list(tree.trunks) + list(tree.branches.values())
    for seg in segs:
        dense, u = _dense_segment(wsys, seg, samples_per_interval)
        xs = dense[..., :NX]
        uu = np.broadcast_to(u[:, None, :NU], xs.shape[:2] + (NU,))
        g = raw.g(xs, uu)
        viol = np.maximum(viol, np.max(np.maximum(g, 0.0), axis=(0, 1)))
        for H, q in sc.obstacles:
            d = np.linalg.norm((xs[..., :3] - q) @ H.T, axis=-1)
            rep["obstacle_margin"] = min(rep["obstacle_margin"], float(np.min(d)))
        rep["speed_max"] = max(rep["speed_max"], float(np.max(np.linalg.norm(xs[..., 3:6], axis=-1))))
        nu = np.linalg.norm(u[:, :NU], axis=-1)
        rep["thrust_min"] = min(rep["thrust_min"], float(np.min(nu)))
        rep["thrust_max"] = max(rep["thrust_max"], float(np.max(nu)))
        cosang = (u[:, :NU] @ (sc.e / np.linalg.norm(sc.e))) / np.maximum(nu, 1e-300)
        rep["pointing_max_deg"] = max(rep["pointing_max_deg"],
                                      float(np.max(np.degrees(np.arccos(np.clip(cosang, -1, 1))))))
        yinc = dense[:, -1, NX] - seg.aug_states[:-1, NX]
        rep["y_increment_max"] = max(rep["y_increment_max"], float(np.max(yinc)))
        rep["dilation_min"] = min(rep["dilation_min"], float(np.min(seg.dilation)))
        rep["dilation_max"] = max(rep["dilation_max"], float(np.max(seg.dilation)))
        mism = np.abs(dense[:, -1, :NX] - seg.aug_states[1:, :NX]) / np.maximum(1.0, np.abs(seg.aug_states[1:, :NX]))
        rep["node_mismatch"] = max(rep["node_mismatch"], float(np.max(mism)))
    for j in tree.branches:
        br = tree.branches[j]
        # cost accumulates through theta; re-integrate the last interval of the branch end
        dense, _ = _dense_segment(wsys, br, samples_per_interval)
        rep["cost"][j] = float(max(br.aug_states[-1, NX - 1], dense[-1, -1, NX - 1]))
        rep["terminal_error"][j] = float(np.max(np.abs(dense[-1, -1, :6] - sc.targets[j])))
    rep["max_violation"] = viol.tolist()
    rep["obstacle_violation"] = float(max(viol[:n_obs], default=0.0))
    if eps is not None:
        rep["eps"] = eps
        rep["y_within_eps"] = rep["y_increment_max"] <= eps * (1 + 1e-3)
    return rep


def validation_passes(rep: dict, sc: NonconvexScenario, rtol: float = 1e-3) -> dict:
    """Pointwise acceptance with relative tolerance ``rtol`` on each physical bound."""
    checks = {
        "obstacle": (not sc.obstacles) or rep["obstacle_margin"] >= 1 - rtol,
        "speed": rep["speed_max"] <= sc.v_max * (1 + rtol),
        "thrust": sc.u_min * (1 - rtol) <= rep["thrust_min"] and rep["thrust_max"] <= sc.u_max * (1 + rtol),
        "pointing": rep["pointing_max_deg"] <= sc.delta_max_deg * (1 + rtol),
        "cost": all(c <= sc.l_max * (1 + rtol) for c in rep["cost"].values()),
    }
    checks["all"] = all(checks.values())
    return checks


# --------------------------------------------------------------------------
# recursion


def run_ddto_scp(sc: NonconvexScenario, N: int | None = None, cfg: ScpConfig | None = None) -> ScpTree:
    """Reject the lowest-priority target each round, halving the node count."""
    cfg = cfg or ScpConfig()
    N = sc.N if N is None else int(N)
    if N < 3 or N % 2 == 0:
        raise SizingError(f"total horizon N={N} must be odd and at least 3")
    pr = list(sc.priorities)
    J = list(pr)
    z = sc.z0.copy()
    t_prev = 0.0
    trunks: list[ScpSegment] = []
    branches: dict[int, ScpSegment] = {}
    bts: dict[int, float] = {}
    rounds = []
    if len(J) == 1:
        res = scp_solve(sc, J, z, N, cfg, has_trunk=False)
        if not res.converged:
            raise ScpRoundError(1, res)
        it = res.iterate
        branches[J[0]] = ScpSegment(it.X[0], it.U[0], 0.0)
        bts[J[0]] = 0.0
        rounds.append(_round_meta(1, J, N, res, 0.0, sc.l_max))
        return ScpTree(trunks, branches, bts, pr, {"rounds": rounds, "N": N, "config": cfg.to_dict()})
    schedule = []
    M = N + 1
    for r in range(len(pr) - 1):
        M = math.ceil(M / 2)
        if M < 2:
            raise SizingError(f"round {r + 1}: node count falls below 2; increase N for {len(pr)} targets")
        schedule.append(M)
    last = None  # most recent converged iterate; its branches all start at z
    for r, M in enumerate(schedule):
        res = scp_solve(sc, J, z, M, cfg, has_trunk=True)
        reject = J[-1]
        keep = [reject] if len(J) > 2 else list(J)
        if not res.converged:
            if last is None:
                raise ScpRoundError(r + 1, res)
            # No trunk of positive duration found from this branch point: the
            # branch times coincide and the rejected target keeps the branch the
            # last converged round already computed from the same point.
            log.warning("round %d did not converge (%s); branch time coincides with round %d",
                        r + 1, _residual_text(res), last[0])
            for j in keep:
                p = last[1].block(j)
                branches[j] = ScpSegment(last[1].X[p], last[1].U[p], t_prev)
                bts[j] = t_prev
            meta = _round_meta(r + 1, J, M, res, 0.0, sc.l_max)
            meta.update(converged=False, coincident_with=last[0], budget_left=rounds[-1]["budget_left"])
            rounds.append(meta)
            J = J[:-1]
            continue
        it = res.iterate
        trunk = ScpSegment(it.X[0], it.U[0], t_prev)
        trunks.append(trunk)
        t_branch = t_prev + it.trunk_time()
        for j in keep:
            p = it.block(j)
            branches[j] = ScpSegment(it.X[p], it.U[p], t_branch)
            bts[j] = t_branch
        rounds.append(_round_meta(r + 1, J, M, res, it.trunk_time(), sc.l_max))
        J = J[:-1]
        z = it.X[0][-1, :NX].copy()
        t_prev = t_branch
        last = (r + 1, it)
    return ScpTree(trunks, branches, bts, pr, {"rounds": rounds, "N": N, "config": cfg.to_dict()})


def _round_meta(r, J, M, res: ScpResult, trunk_time, l_max) -> dict:
    theta = float(res.iterate.X[0][-1, NX - 1])
    return {"round": r, "J": list(J), "M": M, "iterations": len(res.trace), "trunk_time": trunk_time,
            "converged": bool(res.converged), "budget_left": l_max - theta, "trace": res.trace}
