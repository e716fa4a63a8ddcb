"""Operator-splitting solver on the homogeneous self-dual embedding.

Alternates a linear solve with ``I + Q`` (factored once) and a projection
onto the cone product, with over-relaxation.  The constraint data may be
multiplied by a fixed ``scale`` that trades primal against dual progress.
Infeasibility is read off the normalized iterates when ``tau`` collapses.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cones import ConeLayout
from .result import SolveResult, Status
from .scaling import ruiz

ALPHA = 1.5
CERT_TOL = 1e-6


class _Embedding:
    """Scaled data ``(alpha M, alpha q, c)`` with a factorization of ``I + alpha^2 M'M``."""

    def __init__(self, M: sp.csc_matrix, q: np.ndarray, c: np.ndarray, alpha: float):
        self.alpha = alpha
        self.M = (M * alpha).tocsc()
        self.q = q * alpha
        self.c = c
        n = M.shape[1]
        self.lu = spla.splu((sp.identity(n) + self.M.T @ self.M).tocsc(), permc_spec="MMD_AT_PLUS_A")
        self.h_x, self.h_y = self.solve_IM(c, self.q)
        self.denom = 1.0 + c @ self.h_x + self.q @ self.h_y

    def solve_IM(self, rx, ry):
        # [I  M'; -M  I] [x; y] = [rx; ry]
        x = self.lu.solve(rx - self.M.T @ ry)
        return x, ry + self.M @ x

    def solve(self, w: np.ndarray, n: int, m: int) -> np.ndarray:
        """(I + Q)^{-1} w with Q = [[0, M', c], [-M, 0, q], [-c', -q', 0]]."""
        rx, ry = self.solve_IM(w[:n], w[n:n + m])
        # x = rx - tau h_x, y = ry - tau h_y, tau = wt + c'x + q'y
        tau = (w[-1] + self.c @ rx + self.q @ ry) / self.denom
        return np.concatenate([rx - tau * self.h_x, ry - tau * self.h_y, [tau]])


def solve_admm(c, A, b, G, h, layout: ConeLayout, tol: float = 1e-7, max_iter: int = 50000,
               check_every: int = 10, scale: float = 1.0) -> SolveResult:
    n = c.size
    p, mi = A.shape[0], G.shape[0]
    eq = ruiz(A, G, layout)
    D, Ee, Ei = eq.D, eq.E_eq, eq.E_in
    # stack as M x + s = q, s in {0}^p x K
    M = sp.vstack([sp.diags(Ee) @ A @ sp.diags(D), sp.diags(Ei) @ G @ sp.diags(D)]).tocsc()
    q = np.concatenate([Ee * b, Ei * h])
    cs = D * c
    m = p + mi
    A_c, G_c = A.tocsc(), G.tocsc()
    emb = _Embedding(M, q, cs, scale)

    def proj_dual(yv):
        # y in {free}^p x K*; K self-dual
        out = yv.copy()
        if mi:
            out[p:] = layout.project(yv[p:])
        return out

    u = np.zeros(n + m + 1)
    v = np.zeros(n + m + 1)
    u[-1] = v[-1] = 1.0

    nrm_b = max(1.0, np.linalg.norm(b))
    nrm_h = max(1.0, np.linalg.norm(h))
    nrm_c = max(1.0, np.linalg.norm(c))
    best = None
    it = 0
    for it in range(1, max_iter + 1):
        ut = emb.solve(u + v, n, m)
        ut = ALPHA * ut + (1 - ALPHA) * u
        pre = ut - v
        un = pre.copy()
        un[n:n + m] = proj_dual(pre[n:n + m])
        un[-1] = max(pre[-1], 0.0)
        v = v - ut + un
        u = un
        if it % check_every and it != max_iter:
            continue
        x, tau = u[:n], u[-1]
        ys, ss = u[n:n + m] * emb.alpha, v[n:n + m] / emb.alpha
        kappa = v[-1]
        xo = D * x
        ye, yi = Ee * ys[:p], Ei * ys[p:]
        si = ss[p:] / Ei
        rx_h = A_c.T @ ye + G_c.T @ yi
        ry_h = A_c @ xo
        rz_h = G_c @ xo + si
        cx, by, hz = c @ xo, b @ ye, h @ yi
        if tau > 1e-12 * max(1.0, kappa):
            pres = max(np.linalg.norm(ry_h - b * tau) / nrm_b if p else 0.0,
                       np.linalg.norm(rz_h - h * tau) / nrm_h if mi else 0.0) / tau
            dres = np.linalg.norm(rx_h + c * tau) / nrm_c / tau
            pc, dc = cx / tau, -(by + hz) / tau
            gap = abs(pc - dc) / (1.0 + abs(pc) + abs(dc))
            cur = SolveResult(Status.MAX_ITERATIONS, xo / tau, si / tau, ye / tau, yi / tau, pres, dres, gap, it, pc)
            if best is None or max(pres, dres, gap) < max(best.primal_residual, best.dual_residual, best.gap):
                best = cur
            if pres <= tol and dres <= tol and gap <= tol:
                cur.status = Status.OPTIMAL
                return cur
        if by + hz < 0:
            cert = np.linalg.norm(rx_h) / nrm_c / -(by + hz)
            if cert <= CERT_TOL:
                return SolveResult(Status.INFEASIBLE, None, None, ye / -(by + hz), yi / -(by + hz),
                                   cert, np.nan, np.inf, it, np.inf)
        if cx < 0:
            cert = max(np.linalg.norm(ry_h) / nrm_b, np.linalg.norm(rz_h) / nrm_h) / -cx
            if cert <= CERT_TOL:
                return SolveResult(Status.UNBOUNDED, xo / -cx, si / -cx, None, None,
                                   np.nan, cert, np.inf, it, -np.inf)
    if best is None:
        best = SolveResult(Status.MAX_ITERATIONS, None, None, None, None, np.inf, np.inf, np.inf, it)
    best.iterations = it
    best.status = Status.MAX_ITERATIONS
    return best
