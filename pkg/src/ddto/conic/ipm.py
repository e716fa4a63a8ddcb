"""Primal-dual interior-point method on the homogeneous self-dual embedding.

Mehrotra predictor-corrector with Nesterov-Todd scaling.  Each iteration
factors one sparse quasidefinite KKT matrix and performs two solves per
direction (one for the embedding column, one for the right-hand side).
"""

from __future__ import annotations

import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cones import ConeLayout, NTScaling
from .result import SolveResult, Status
from .scaling import ruiz

log = logging.getLogger(__name__)

STEP = 0.99
REG = 1e-9


class _KKT:
    def __init__(self, A: sp.csc_matrix, G: sp.csc_matrix):
        self.A, self.G = A, G
        self.n, self.p, self.m = A.shape[1], A.shape[0], G.shape[0]
        self._top = sp.bmat([[None, A.T, G.T], [A, None, None], [G, None, None]],
                            format="csc") if (self.p or self.m) else sp.csc_matrix((self.n, self.n))
        self._top = sp.csc_matrix(self._top, shape=(self.n + self.p + self.m,) * 2)

    def factor(self, W2: sp.csc_matrix) -> None:
        n, p, m = self.n, self.p, self.m
        blk = sp.block_diag([sp.csc_matrix((n, n)), sp.csc_matrix((p, p)), -W2], format="csc")
        self.K0 = (self._top + blk).tocsc()
        reg = np.concatenate([np.full(n, REG), np.full(p, -REG), np.full(m, -REG)])
        self.Kr = (self.K0 + sp.diags(reg)).tocsc()
        # quasidefinite: static diagonal pivots keep the symmetric fill-reducing order
        self.pivoting = False
        self.lu = spla.splu(self.Kr, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                            options={"SymmetricMode": True})

    def _repivot(self) -> None:
        self.pivoting = True
        self.lu = spla.splu(self.Kr, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.01)

    def solve(self, rhs: np.ndarray, refine: int = 3) -> np.ndarray:
        scale = max(1.0, np.linalg.norm(rhs, np.inf))
        sol = self.lu.solve(rhs)
        for _ in range(refine):
            r = rhs - self.K0 @ sol
            if np.linalg.norm(r, np.inf) <= 1e-14 * scale:
                break
            sol = sol + self.lu.solve(r)
        if not self.pivoting:
            r = rhs - self.K0 @ sol
            if not np.all(np.isfinite(sol)) or np.linalg.norm(r, np.inf) > 1e-9 * scale:
                self._repivot()
                return self.solve(rhs, refine)
        return sol


def solve_ipm(c, A, b, G, h, layout: ConeLayout, tol: float = 1e-7, max_iter: int = 100) -> SolveResult:
    """Solve min c'x s.t. Ax = b, Gx + s = h, s in K (rows of G in layout order)."""
    n = c.size
    eq = ruiz(A, G, layout)
    D, Ee, Ei = eq.D, eq.E_eq, eq.E_in
    As = (sp.diags(Ee) @ A @ sp.diags(D)).tocsc()
    Gs = (sp.diags(Ei) @ G @ sp.diags(D)).tocsc()
    bs, hs, cs = Ee * b, Ei * h, D * c
    A_c, G_c = A.tocsc(), G.tocsc()

    kkt = _KKT(As, Gs)
    p, m = As.shape[0], Gs.shape[0]
    deg = layout.degree

    nrm_b = max(1.0, np.linalg.norm(b))
    nrm_h = max(1.0, np.linalg.norm(h))
    nrm_c = max(1.0, np.linalg.norm(c))

    # initial point: least-norm primal/dual slacks, shifted into the cone
    kkt.factor(sp.identity(m, format="csc"))
    sol = kkt.solve(np.concatenate([np.zeros(n), bs, hs]))
    x = sol[:n]
    s = layout.shift_to_interior(-sol[n + p:]) if m else np.zeros(0)
    sol = kkt.solve(np.concatenate([-cs, np.zeros(p), np.zeros(m)]))
    y = sol[n:n + p]
    z = layout.shift_to_interior(sol[n + p:]) if m else np.zeros(0)
    tau, kappa = 1.0, 1.0

    def unscaled(x, y, z, s):
        return D * x, Ee * y, Ei * z, s / Ei

    best = None
    it = 0
    status = Status.MAX_ITERATIONS
    stall = 0
    for it in range(max_iter + 1):
        xo, yo, zo, so = unscaled(x, y, z, s)
        # residuals in original units
        rx_h = A_c.T @ yo + G_c.T @ zo
        ry_h = A_c @ xo
        rz_h = G_c @ xo + so
        cx, by, hz = c @ xo, b @ yo, h @ zo
        pres = max(np.linalg.norm(ry_h - b * tau) / nrm_b if p else 0.0,
                   np.linalg.norm(rz_h - h * tau) / nrm_h if m else 0.0) / tau
        dres = np.linalg.norm(rx_h + c * tau) / nrm_c / tau
        gap_abs = (s @ z) / tau ** 2
        pcost, dcost = cx / tau, -(by + hz) / tau
        gap = gap_abs / max(1.0, min(abs(pcost), abs(dcost)))
        cur = SolveResult(Status.MAX_ITERATIONS, xo / tau, so / tau, yo / tau, zo / tau, pres, dres, gap, it, pcost)
        if best is None or max(pres, dres, gap) < max(best.primal_residual, best.dual_residual, best.gap):
            best = cur
        if pres <= tol and dres <= tol and (gap <= tol or gap_abs <= tol):
            cur.status = Status.OPTIMAL
            return cur
        if by + hz < 0:
            cert = np.linalg.norm(rx_h) / nrm_c / -(by + hz)
            if cert <= tol:
                return SolveResult(Status.INFEASIBLE, None, None, yo / -(by + hz), zo / -(by + hz),
                                   cert, dres, np.inf, it, np.inf)
        if cx < 0:
            cert = max(np.linalg.norm(ry_h) / nrm_b, np.linalg.norm(rz_h) / nrm_h) / -cx
            if cert <= tol:
                return SolveResult(Status.UNBOUNDED, xo / -cx, so / -cx, None, None,
                                   pres, cert, np.inf, it, -np.inf)
        if it == max_iter or stall >= 3:
            break

        # scaled residuals for the Newton system
        r_x = As.T @ y + Gs.T @ z + cs * tau
        r_y = As @ x - bs * tau
        r_z = s + Gs @ x - hs * tau
        r_t = kappa + cs @ x + bs @ y + hs @ z
        mu = (s @ z + tau * kappa) / (deg + 1)

        W = NTScaling.compute(layout, s, z) if m else None
        try:
            kkt.factor(W.squared_matrix() if m else sp.csc_matrix((0, 0)))
        except RuntimeError:
            log.debug("KKT factorization failed at iteration %d", it)
            break
        lam = W.lam if m else np.zeros(0)
        sol1 = kkt.solve(np.concatenate([-cs, bs, hs]))
        x1, y1, z1 = sol1[:n], sol1[n:n + p], sol1[n + p:]

        def direction(eta, d_s, d_k):
            ws = layout.jordan_solve(lam, d_s) if m else np.zeros(0)
            rhs = np.concatenate([-eta * r_x, -eta * r_y, -eta * r_z - (W.apply(ws) if m else 0.0)])
            sol2 = kkt.solve(rhs)
            x2, y2, z2 = sol2[:n], sol2[n:n + p], sol2[n + p:]
            den = cs @ x1 + bs @ y1 + hs @ z1 - kappa / tau
            dtau = (-eta * r_t - d_k / tau - cs @ x2 - bs @ y2 - hs @ z2) / den
            dx, dy, dz = x2 + dtau * x1, y2 + dtau * y1, z2 + dtau * z1
            ds = (W.apply(ws) - W.apply(W.apply(dz))) if m else np.zeros(0)
            dkap = (d_k - kappa * dtau) / tau
            return dx, dy, dz, ds, dtau, dkap

        def steplen(dz, ds, dtau, dkap):
            a = np.inf
            if m:
                a = min(a, layout.max_step(lam, W.apply(ds, inverse=True)),
                        layout.max_step(lam, W.apply(dz)))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkap < 0:
                a = min(a, -kappa / dkap)
            return a

        # predictor
        d_s = -layout.jordan(lam, lam) if m else np.zeros(0)
        aff = direction(1.0, d_s, -tau * kappa)
        a_aff = min(1.0, steplen(aff[2], aff[3], aff[4], aff[5]))
        sigma = float(np.clip((1.0 - a_aff) ** 3, 0.0, 1.0))
        # corrector
        if m:
            corr = layout.jordan(W.apply(aff[3], inverse=True), W.apply(aff[2]))
            d_s = -layout.jordan(lam, lam) - corr + sigma * mu * layout.identity()
        d_k = -tau * kappa - aff[4] * aff[5] + sigma * mu
        dx, dy, dz, ds, dtau, dkap = direction(1.0 - sigma, d_s, d_k)
        alpha = min(1.0, STEP * steplen(dz, ds, dtau, dkap))
        if not np.all(np.isfinite(dx)) or not np.isfinite(alpha):
            break
        stall = stall + 1 if alpha < 1e-10 else 0
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        tau += alpha * dtau
        kappa += alpha * dkap
        # rescale the embedding so tau stays O(1)
        if tau > 1e6 or tau < 1e-6:
            f = 1.0 / tau
            x, y, z, s, kappa, tau = x * f, y * f, z * f, s * f, kappa * f, 1.0

    best.iterations = it
    best.status = Status.MAX_ITERATIONS
    return best
