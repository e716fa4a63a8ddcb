"""Conic program model and solvers (interior-point and operator splitting)."""

from __future__ import annotations

import logging

import numpy as np

from .cones import ConeLayout
from .program import (ConeKind, ConeSpec, ConicProgram, MalformedProgramError,
                      ProgramBuilder, ProgramDataError)
from .result import Feasibility, SolveResult, Status

log = logging.getLogger(__name__)

BACKENDS = ("ipm", "admm")
DEFAULT_MAX_ITER = {"ipm": 150, "admm": 50000}


def solve(prog: ConicProgram, tol: float = 1e-7, max_iter: int | None = None,
          backend: str = "ipm") -> SolveResult:
    """Solve ``min c'x  s.t.  Gx + s = h, s in K``.

    ``s``, ``z`` in the result are in the original row order; ``y`` is unused
    (the equality multipliers are stored in the matching rows of ``z``).
    """
    if backend not in BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    if not isinstance(prog, ConicProgram):
        raise MalformedProgramError("expected a ConicProgram")
    if max_iter is None:
        max_iter = DEFAULT_MAX_ITER[backend]
    layout = ConeLayout.from_cones(prog.cones)
    G = prog.G.tocsr()
    A, b = G[layout.eq_rows], prog.h[layout.eq_rows]
    Gi, hi = G[layout.ineq_rows], prog.h[layout.ineq_rows]
    if backend == "ipm":
        from .ipm import solve_ipm
        res = solve_ipm(prog.c, A, b, Gi, hi, layout, tol=tol, max_iter=max_iter)
    else:
        from .admm import solve_admm
        res = solve_admm(prog.c, A, b, Gi, hi, layout, tol=tol, max_iter=max_iter)
    res.backend = backend
    # map back to original row order
    m = prog.m
    if res.s is not None:
        s = np.zeros(m)
        s[layout.ineq_rows] = res.s
        res.s = s
    if res.z is not None or res.y is not None:
        z = np.zeros(m)
        if res.y is not None:
            z[layout.eq_rows] = res.y
        if res.z is not None:
            z[layout.ineq_rows] = res.z
        res.z, res.y = z, None
    log.debug("%s: %s after %d iterations (pres %.2e dres %.2e gap %.2e)", backend, res.status.value,
              res.iterations, res.primal_residual, res.dual_residual, res.gap)
    return res


def check_feasible(prog: ConicProgram, tol: float = 1e-7, max_iter: int | None = None,
                   backend: str = "ipm") -> Feasibility:
    """Tri-state feasibility of the constraint set (objective dropped).

    ``bool(result)`` is True only for FEASIBLE, so callers that branch on it
    treat an indeterminate outcome as infeasible.
    """
    res = solve(prog.with_objective(np.zeros(prog.n)), tol=tol, max_iter=max_iter, backend=backend)
    if res.status is Status.OPTIMAL:
        return Feasibility.FEASIBLE
    if res.status is Status.INFEASIBLE:
        return Feasibility.INFEASIBLE
    log.warning("feasibility check indeterminate (%s after %d iterations); treating as infeasible",
                res.status.value, res.iterations)
    return Feasibility.INDETERMINATE


def quad_cost_as_cone(builder: ProgramBuilder, u_idx, l_max: float) -> None:
    """Add ``sum_k ||u_k||^2 <= l_max`` as one second-order cone row block.

    ``u_idx`` is any index array (all inputs are stacked).
    """
    if l_max < 0:
        raise ValueError("l_max must be nonnegative")
    idx = np.asarray(u_idx).ravel()
    k = idx.size
    C = np.vstack([np.zeros((1, k)), np.eye(k)])
    const = np.zeros(k + 1)
    const[0] = np.sqrt(l_max)
    builder.soc([(idx, C)], const)


__all__ = ["ConeKind", "ConeSpec", "ConicProgram", "ProgramBuilder", "MalformedProgramError",
           "ProgramDataError", "SolveResult", "Status", "Feasibility", "solve", "check_feasible",
           "quad_cost_as_cone", "BACKENDS"]
