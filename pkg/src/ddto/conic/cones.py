"""Vectorized operations on products of nonnegative and second-order cones.

Rows of the inequality part are permuted so that all nonnegative rows come
first, followed by second-order cones grouped by dimension.  Each group is
stored contiguously and reshaped to ``(count, dim)`` for batched math.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .program import ConeKind, ConeSpec


@dataclass
class ConeLayout:
    eq_rows: np.ndarray          # original row indices of zero-cone rows
    ineq_rows: np.ndarray        # original row indices, permuted (lin first, then soc groups)
    n_lin: int
    soc_groups: list[tuple[int, int, int]]   # (offset, count, dim) within the inequality part

    @classmethod
    def from_cones(cls, cones: list[ConeSpec]) -> "ConeLayout":
        eq, lin = [], []
        socs: dict[int, list[np.ndarray]] = {}
        off = 0
        for k in cones:
            rows = np.arange(off, off + k.dim)
            off += k.dim
            if k.kind is ConeKind.ZERO:
                eq.append(rows)
            elif k.kind is ConeKind.NONNEG:
                lin.append(rows)
            else:
                socs.setdefault(k.dim, []).append(rows)
        lin_rows = np.concatenate(lin) if lin else np.zeros(0, dtype=int)
        parts = [lin_rows]
        groups = []
        pos = lin_rows.size
        for dim in sorted(socs):
            blocks = socs[dim]
            parts.append(np.concatenate(blocks))
            groups.append((pos, len(blocks), dim))
            pos += len(blocks) * dim
        ineq = np.concatenate(parts) if parts else np.zeros(0, dtype=int)
        eqr = np.concatenate(eq) if eq else np.zeros(0, dtype=int)
        return cls(eqr, ineq.astype(int), lin_rows.size, groups)

    @property
    def m_ineq(self) -> int:
        return self.ineq_rows.size

    @property
    def degree(self) -> int:
        return self.n_lin + sum(cnt for _, cnt, _ in self.soc_groups)

    def blocks(self, v: np.ndarray):
        """Yield (group view of shape (count, dim)) for each soc group."""
        for off, cnt, dim in self.soc_groups:
            yield v[off:off + cnt * dim].reshape(cnt, dim)

    def identity(self) -> np.ndarray:
        e = np.zeros(self.m_ineq)
        e[:self.n_lin] = 1.0
        for off, cnt, dim in self.soc_groups:
            e[off:off + cnt * dim:dim] = 1.0
        return e

    def dot(self, u: np.ndarray, v: np.ndarray) -> float:
        return float(u @ v)

    def jordan(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        out = np.empty_like(u)
        nl = self.n_lin
        out[:nl] = u[:nl] * v[:nl]
        for (off, cnt, dim), U, V in zip(self.soc_groups, self.blocks(u), self.blocks(v)):
            O = out[off:off + cnt * dim].reshape(cnt, dim)
            O[:, 0] = np.einsum("ij,ij->i", U, V)
            O[:, 1:] = U[:, :1] * V[:, 1:] + V[:, :1] * U[:, 1:]
        return out

    def jordan_solve(self, lam: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Return w with lam o w = d (lam interior)."""
        out = np.empty_like(d)
        nl = self.n_lin
        out[:nl] = d[:nl] / lam[:nl]
        for (off, cnt, dim), L, D in zip(self.soc_groups, self.blocks(lam), self.blocks(d)):
            O = out[off:off + cnt * dim].reshape(cnt, dim)
            l0, l1 = L[:, 0], L[:, 1:]
            d0, d1 = D[:, 0], D[:, 1:]
            det = l0 * l0 - np.einsum("ij,ij->i", l1, l1)
            w0 = (l0 * d0 - np.einsum("ij,ij->i", l1, d1)) / det
            O[:, 0] = w0
            O[:, 1:] = (d1 - l1 * w0[:, None]) / l0[:, None]
        return out

    def interior_margin(self, v: np.ndarray) -> float:
        """min over cones of (v0 - ||v1||) / lin entries; positive iff interior."""
        vals = [np.inf]
        if self.n_lin:
            vals.append(v[:self.n_lin].min())
        for V in self.blocks(v):
            vals.append(np.min(V[:, 0] - np.linalg.norm(V[:, 1:], axis=1)))
        return float(min(vals))

    def shift_to_interior(self, v: np.ndarray) -> np.ndarray:
        """v + (1 + alpha) e when v is not strictly interior (alpha = -margin)."""
        marg = self.interior_margin(v)
        if marg > 1e-8 * max(1.0, np.abs(v).max(initial=0.0)) and marg > 0:
            return v
        return v + (1.0 + max(0.0, -marg)) * self.identity()

    def max_step(self, u: np.ndarray, du: np.ndarray) -> float:
        """Largest alpha with u + alpha du in the cone (u interior)."""
        alpha = np.inf
        nl = self.n_lin
        if nl:
            neg = du[:nl] < 0
            if np.any(neg):
                alpha = min(alpha, float(np.min(-u[:nl][neg] / du[:nl][neg])))
        for U, D in zip(self.blocks(u), self.blocks(du)):
            u0, u1 = U[:, 0], U[:, 1:]
            d0, d1 = D[:, 0], D[:, 1:]
            a = d0 * d0 - np.einsum("ij,ij->i", d1, d1)
            b = u0 * d0 - np.einsum("ij,ij->i", u1, d1)
            c = u0 * u0 - np.einsum("ij,ij->i", u1, u1)
            c = np.maximum(c, 0.0)
            disc = b * b - a * c
            roots = np.full(a.shape, np.inf)
            real = disc >= 0
            sq = np.sqrt(np.where(real, disc, 0.0))
            q = -(b + np.where(b >= 0, sq, -sq))
            with np.errstate(divide="ignore", invalid="ignore"):
                r1 = np.where(a != 0, q / a, np.inf)
                r2 = np.where(q != 0, c / q, np.inf)
            for r in (r1, r2):
                ok = real & np.isfinite(r) & (r > 0)
                roots = np.where(ok, np.minimum(roots, r), roots)
            # a ray leaving through the apex without a sign change in q
            with np.errstate(divide="ignore", invalid="ignore"):
                r0 = np.where(d0 < 0, -u0 / d0, np.inf)
            roots = np.minimum(roots, np.where(r0 > 0, r0, np.inf))
            if roots.size:
                alpha = min(alpha, float(roots.min()))
        return alpha

    def project(self, v: np.ndarray) -> np.ndarray:
        out = v.copy()
        nl = self.n_lin
        out[:nl] = np.maximum(v[:nl], 0.0)
        for (off, cnt, dim), V in zip(self.soc_groups, self.blocks(v)):
            O = out[off:off + cnt * dim].reshape(cnt, dim)
            t = V[:, 0]
            nv = np.linalg.norm(V[:, 1:], axis=1)
            inside = nv <= t
            polar = nv <= -t
            mid = ~(inside | polar)
            O[polar] = 0.0
            if np.any(mid):
                a = 0.5 * (t[mid] + nv[mid])
                O[mid, 0] = a
                O[mid, 1:] = V[mid, 1:] * (a / nv[mid])[:, None]
        return out

    def block_max(self, v: np.ndarray) -> np.ndarray:
        """Per-row value replaced by the max over its cone block (for equilibration)."""
        out = v.copy()
        for (off, cnt, dim), V in zip(self.soc_groups, self.blocks(v)):
            out[off:off + cnt * dim] = np.repeat(V.max(axis=1), dim)
        return out


@dataclass
class NTScaling:
    """Nesterov-Todd scaling W (symmetric) with W z = W^{-1} s = lam."""

    layout: ConeLayout
    lin_w: np.ndarray
    soc: list[tuple[np.ndarray, np.ndarray]]   # per group: (eta (cnt,), wbar (cnt, dim))
    lam: np.ndarray

    @classmethod
    def compute(cls, layout: ConeLayout, s: np.ndarray, z: np.ndarray) -> "NTScaling":
        nl = layout.n_lin
        lin_w = np.sqrt(s[:nl] / z[:nl])
        lam = np.empty_like(s)
        lam[:nl] = np.sqrt(s[:nl] * z[:nl])
        soc = []
        for (off, cnt, dim), S, Z in zip(layout.soc_groups, layout.blocks(s), layout.blocks(z)):
            sJs = S[:, 0] ** 2 - np.einsum("ij,ij->i", S[:, 1:], S[:, 1:])
            zJz = Z[:, 0] ** 2 - np.einsum("ij,ij->i", Z[:, 1:], Z[:, 1:])
            sJs = np.maximum(sJs, 1e-300)
            zJz = np.maximum(zJz, 1e-300)
            sb = S / np.sqrt(sJs)[:, None]
            zb = Z / np.sqrt(zJz)[:, None]
            gamma = np.sqrt(np.maximum(0.5 * (1.0 + np.einsum("ij,ij->i", zb, sb)), 1e-300))
            Jzb = zb.copy()
            Jzb[:, 1:] *= -1
            wb = (sb + Jzb) / (2 * gamma)[:, None]
            eta = (sJs / zJz) ** 0.25
            soc.append((eta, wb))
        scal = cls(layout, lin_w, soc, lam)
        # lam = W z, computed through the same operator for consistency
        lam_full = scal.apply(z)
        lam[nl:] = lam_full[nl:]
        scal.lam = lam
        return scal

    @staticmethod
    def _soc_apply(eta, wb, V, inverse=False):
        w0 = wb[:, 0]
        w1 = wb[:, 1:]
        v0 = V[:, 0]
        v1 = V[:, 1:]
        w1v1 = np.einsum("ij,ij->i", w1, v1)
        out = np.empty_like(V)
        sgn = -1.0 if inverse else 1.0
        out[:, 0] = w0 * v0 + sgn * w1v1
        out[:, 1:] = v1 + (sgn * v0 + w1v1 / (1.0 + w0))[:, None] * w1
        scale = 1.0 / eta if inverse else eta
        return out * scale[:, None]

    def apply(self, v: np.ndarray, inverse: bool = False) -> np.ndarray:
        out = np.empty_like(v)
        nl = self.layout.n_lin
        out[:nl] = v[:nl] / self.lin_w if inverse else v[:nl] * self.lin_w
        for (off, cnt, dim), (eta, wb), V in zip(self.layout.soc_groups, self.soc, self.layout.blocks(v)):
            out[off:off + cnt * dim] = self._soc_apply(eta, wb, V, inverse).ravel()
        return out

    def squared_matrix(self) -> sp.csc_matrix:
        """W^2 as a sparse block-diagonal matrix."""
        nl = self.layout.n_lin
        rows = [np.arange(nl)]
        cols = [np.arange(nl)]
        vals = [self.lin_w ** 2]
        for (off, cnt, dim), (eta, wb) in zip(self.layout.soc_groups, self.soc):
            # W_std^2 = 2 wb wb' - J  (wb' J wb = 1)
            blk = 2.0 * np.einsum("ki,kj->kij", wb, wb)
            J = -np.ones(dim)
            J[0] = 1.0
            blk -= np.diag(J)[None, :, :]
            blk *= (eta ** 2)[:, None, None]
            base = off + dim * np.arange(cnt)
            ii, jj = np.meshgrid(np.arange(dim), np.arange(dim), indexing="ij")
            rows.append((base[:, None, None] + ii[None]).ravel())
            cols.append((base[:, None, None] + jj[None]).ravel())
            vals.append(blk.ravel())
        m = self.layout.m_ineq
        return sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m))
