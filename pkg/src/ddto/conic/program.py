"""Cone-form program data model and an incremental builder.

A program is stored as

    minimize    c' x
    subject to  G x + s = h,   s in K = K_1 x ... x K_p

where every K_i is a zero cone, a nonnegative orthant, or a second-order
cone ``{(t, v) : ||v|| <= t}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class MalformedProgramError(ValueError):
    """Program dimensions are inconsistent."""


class ProgramDataError(ValueError):
    """Program data contains non-finite values."""


class ConeKind(str, Enum):
    ZERO = "zero"
    NONNEG = "nonneg"
    SOC = "soc"


@dataclass(frozen=True)
class ConeSpec:
    kind: ConeKind
    dim: int

    def __post_init__(self):
        object.__setattr__(self, "kind", ConeKind(self.kind))
        if int(self.dim) < 1:
            raise MalformedProgramError(f"cone dimension must be positive, got {self.dim}")


@dataclass
class ConicProgram:
    c: np.ndarray
    G: sp.csc_matrix
    h: np.ndarray
    cones: list[ConeSpec]
    var_map: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        self.h = np.asarray(self.h, dtype=float).ravel()
        self.G = sp.csc_matrix(self.G, dtype=float)
        n, m = self.c.size, self.h.size
        if self.G.shape != (m, n):
            raise MalformedProgramError(
                f"G has shape {self.G.shape}, expected ({m}, {n})")
        if sum(k.dim for k in self.cones) != m:
            raise MalformedProgramError(
                f"cone dimensions sum to {sum(k.dim for k in self.cones)}, expected {m}")
        for name, arr in (("c", self.c), ("h", self.h), ("G", self.G.data)):
            if not np.all(np.isfinite(arr)):
                raise ProgramDataError(f"non-finite entries in {name}")

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def m(self) -> int:
        return self.h.size

    def extract(self, x: np.ndarray, name: str) -> np.ndarray:
        idx = self.var_map[name]
        return np.asarray(x)[idx]

    def with_objective(self, c: np.ndarray) -> "ConicProgram":
        return ConicProgram(np.asarray(c, dtype=float), self.G, self.h, list(self.cones), dict(self.var_map))

    def scaled_rows(self, factors: np.ndarray) -> "ConicProgram":
        """Scale each cone block of (G, h) by a positive factor (one per cone)."""
        factors = np.asarray(factors, dtype=float)
        row_scale = np.repeat(factors, [k.dim for k in self.cones])
        D = sp.diags(row_scale)
        return ConicProgram(self.c, D @ self.G, row_scale * self.h, list(self.cones), dict(self.var_map))

    def cone_membership(self, s: np.ndarray, tol: float = 0.0) -> bool:
        """True if ``s`` lies in K up to an absolute tolerance."""
        off = 0
        for k in self.cones:
            blk = s[off:off + k.dim]
            off += k.dim
            if k.kind is ConeKind.ZERO and np.max(np.abs(blk)) > tol:
                return False
            if k.kind is ConeKind.NONNEG and np.min(blk) < -tol:
                return False
            if k.kind is ConeKind.SOC and np.linalg.norm(blk[1:]) - blk[0] > tol:
                return False
        return True

    def dump(self, path: str | Path) -> None:
        """Write the program as sparse (row, col, value) triplets plus cone list.

        Format (whitespace separated, ``#`` starts a comment)::

            n m nnz
            c  <n values>
            h  <m values>
            cones  <kind:dim> ...
            <row> <col> <value>     (nnz lines, zero-based)
        """
        G = self.G.tocoo()
        lines = [f"# ddto conic program", f"{self.n} {self.m} {G.nnz}",
                 "c " + " ".join(repr(float(v)) for v in self.c),
                 "h " + " ".join(repr(float(v)) for v in self.h),
                 "cones " + " ".join(f"{k.kind.value}:{k.dim}" for k in self.cones)]
        order = np.lexsort((G.col, G.row))
        for r, cidx, v in zip(G.row[order], G.col[order], G.data[order]):
            lines.append(f"{r} {cidx} {float(v)!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ConicProgram":
        rows = [ln for ln in Path(path).read_text().splitlines()
                if ln.strip() and not ln.lstrip().startswith("#")]
        n, m, nnz = (int(v) for v in rows[0].split())
        c = np.array([float(v) for v in rows[1].split()[1:]])
        h = np.array([float(v) for v in rows[2].split()[1:]])
        cones = []
        for tok in rows[3].split()[1:]:
            kind, dim = tok.split(":")
            cones.append(ConeSpec(ConeKind(kind), int(dim)))
        trip = np.array([[float(v) for v in ln.split()] for ln in rows[4:4 + nnz]]).reshape(-1, 3)
        G = sp.csc_matrix((trip[:, 2], (trip[:, 0].astype(int), trip[:, 1].astype(int))), shape=(m, n))
        return cls(c, G, h, cones)


class ProgramBuilder:
    """Accumulates variables and affine cone constraints.

    Constraints are written as ``sum_t C_t x[idx_t] + d in K``.
    """

    def __init__(self):
        self.n = 0
        self.var_map: dict[str, np.ndarray] = {}
        self._rows: list[np.ndarray] = []
        self._cols: list[np.ndarray] = []
        self._vals: list[np.ndarray] = []
        self._h: list[np.ndarray] = []
        self._cones: list[ConeSpec] = []
        self._m = 0
        self._c: dict[int, float] = {}

    def var(self, name: str, shape: int | tuple[int, ...] = ()) -> np.ndarray:
        shape = () if isinstance(shape, tuple) and not shape else tuple(int(d) for d in np.atleast_1d(shape))
        size = int(np.prod(shape)) if shape else 1
        idx = np.arange(self.n, self.n + size).reshape(shape)
        self.n += size
        self.var_map[name] = idx
        return idx

    def add_objective(self, idx, coef) -> None:
        idx = np.atleast_1d(idx).ravel()
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape)
        for i, v in zip(idx, coef):
            self._c[int(i)] = self._c.get(int(i), 0.0) + float(v)

    def add(self, kind: ConeKind | str, terms, const) -> None:
        """Add ``sum C @ x[idx] + const in K``.

        ``terms`` is a list of ``(idx, C)``; ``C`` may be a scalar, a vector
        (elementwise with ``idx``), or a dense/sparse matrix.
        """
        const = np.atleast_1d(np.asarray(const, dtype=float)).ravel()
        m = const.size
        for idx, C in terms:
            idx = np.atleast_1d(idx).ravel()
            if sp.issparse(C):
                C = C.tocoo()
                r, cc, v = C.row, idx[C.col], C.data
            else:
                C = np.asarray(C, dtype=float)
                if C.ndim == 0:
                    C = np.full(idx.size, float(C))
                if C.ndim == 1:
                    if C.size != idx.size or idx.size != m:
                        raise MalformedProgramError("elementwise term size mismatch")
                    r, cc, v = np.arange(m), idx, C
                else:
                    if C.shape != (m, idx.size):
                        raise MalformedProgramError(f"term shape {C.shape} != ({m}, {idx.size})")
                    r, cidx = np.nonzero(C)
                    cc, v = idx[cidx], C[r, cidx]
            # G x + s = h with s = C x + d  =>  G = -C, h = d
            self._rows.append(np.asarray(r) + self._m)
            self._cols.append(np.asarray(cc))
            self._vals.append(-np.asarray(v, dtype=float))
        self._h.append(const)
        kind = ConeKind(kind)
        if kind is ConeKind.SOC:
            self._cones.append(ConeSpec(kind, m))
        else:
            if self._cones and self._cones[-1].kind is kind:
                self._cones[-1] = ConeSpec(kind, self._cones[-1].dim + m)
            else:
                self._cones.append(ConeSpec(kind, m))
        self._m += m

    def eq(self, terms, const) -> None:
        self.add(ConeKind.ZERO, terms, const)

    def nonneg(self, terms, const) -> None:
        self.add(ConeKind.NONNEG, terms, const)

    def soc(self, terms, const) -> None:
        self.add(ConeKind.SOC, terms, const)

    def build(self) -> ConicProgram:
        c = np.zeros(self.n)
        for i, v in self._c.items():
            c[i] = v
        if self._rows:
            rows = np.concatenate(self._rows)
            cols = np.concatenate(self._cols)
            vals = np.concatenate(self._vals)
        else:
            rows = cols = np.zeros(0, dtype=int)
            vals = np.zeros(0)
        G = sp.csc_matrix((vals, (rows, cols)), shape=(self._m, self.n))
        G.sum_duplicates()
        h = np.concatenate(self._h) if self._h else np.zeros(0)
        return ConicProgram(c, G, h, list(self._cones), dict(self.var_map))
