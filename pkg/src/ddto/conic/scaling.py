"""Ruiz equilibration of the constraint matrix, respecting cone blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .cones import ConeLayout


@dataclass
class Equilibration:
    D: np.ndarray        # column scaling (n,)
    E_eq: np.ndarray     # row scaling of equality rows
    E_in: np.ndarray     # row scaling of inequality rows (permuted order)


def _row_inf_norm(M: sp.csr_matrix) -> np.ndarray:
    if M.shape[0] == 0:
        return np.zeros(0)
    return np.asarray(abs(M).max(axis=1).todense()).ravel()


def _col_inf_norm(M: sp.csc_matrix) -> np.ndarray:
    if M.shape[1] == 0 or M.shape[0] == 0:
        return np.zeros(M.shape[1])
    return np.asarray(abs(M).max(axis=0).todense()).ravel()


def ruiz(A: sp.csr_matrix, G: sp.csr_matrix, layout: ConeLayout, iters: int = 15,
         lo: float = 1e-4, hi: float = 1e4) -> Equilibration:
    n = A.shape[1]
    D = np.ones(n)
    E_eq = np.ones(A.shape[0])
    E_in = np.ones(G.shape[0])
    A_s, G_s = A.tocsr(), G.tocsr()
    for _ in range(iters):
        M = sp.vstack([A_s, G_s]).tocsc()
        cn = _col_inf_norm(M)
        cn[cn == 0] = 1.0
        dc = 1.0 / np.sqrt(cn)
        re = _row_inf_norm(A_s)
        re[re == 0] = 1.0
        ri = _row_inf_norm(G_s)
        ri = layout.block_max(ri) if ri.size else ri
        ri[ri == 0] = 1.0
        de, di = 1.0 / np.sqrt(re), 1.0 / np.sqrt(ri)
        D = np.clip(D * dc, lo, hi)
        E_eq = np.clip(E_eq * de, lo, hi)
        E_in = np.clip(E_in * di, lo, hi)
        A_s = (sp.diags(E_eq) @ A @ sp.diags(D)).tocsr()
        G_s = (sp.diags(E_in) @ G @ sp.diags(D)).tocsr()
        if np.all(np.abs(1 - dc) < 1e-3) and np.all(np.abs(1 - de) < 1e-3) and np.all(np.abs(1 - di) < 1e-3):
            break
    return Equilibration(D, E_eq, E_in)
