from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from ddto import conic
from ddto.conic import (ConeKind, ConeSpec, ConicProgram, Feasibility, MalformedProgramError, ProgramBuilder,
                        ProgramDataError, Status)


def random_socp(seed: int, n: int = 8, n_eq: int = 2, n_lin: int = 4, soc_dims=(3, 4)):
    """Strictly feasible, bounded program built from an interior primal-dual pair."""
    rng = np.random.default_rng(seed)
    cones = [ConeSpec("zero", n_eq), ConeSpec("nonneg", n_lin)] + [ConeSpec("soc", d) for d in soc_dims]
    m = n_eq + n_lin + sum(soc_dims)
    G = rng.normal(size=(m, n))
    x0 = rng.normal(size=n)
    s0 = np.concatenate([np.zeros(n_eq), rng.uniform(0.5, 2, n_lin)]
                        + [np.r_[2.0 + rng.uniform(0, 1), rng.uniform(-1, 1, d - 1) / np.sqrt(d)] for d in soc_dims])
    z0 = np.concatenate([rng.normal(size=n_eq), rng.uniform(0.5, 2, n_lin)]
                        + [np.r_[2.0 + rng.uniform(0, 1), rng.uniform(-1, 1, d - 1) / np.sqrt(d)] for d in soc_dims])
    return ConicProgram(-G.T @ z0, sp.csc_matrix(G), G @ x0 + s0, cones)


def cvxpy_objective(prog: ConicProgram) -> float:
    cp = pytest.importorskip("cvxpy")
    x = cp.Variable(prog.n)
    G = prog.G.toarray()
    cons, off = [], 0
    for k in prog.cones:
        r = slice(off, off + k.dim)
        s = prog.h[r] - G[r] @ x
        if k.kind is ConeKind.ZERO:
            cons.append(s == 0)
        elif k.kind is ConeKind.NONNEG:
            cons.append(s >= 0)
        else:
            cons.append(cp.SOC(s[0], s[1:]))
        off += k.dim
    pb = cp.Problem(cp.Minimize(prog.c @ x), cons)
    pb.solve(solver="CLARABEL")
    assert pb.status == "optimal"
    return float(pb.value)


@pytest.mark.parametrize("seed", range(6))
def test_ipm_matches_cvxpy(seed):
    prog = random_socp(seed)
    res = conic.solve(prog, tol=1e-9)
    assert res.status is Status.OPTIMAL
    ref = cvxpy_objective(prog)
    assert abs(res.objective - ref) <= 1e-6 * max(1.0, abs(ref))
    assert prog.cone_membership(res.s, tol=1e-7)
    np.testing.assert_allclose(prog.G @ res.x + res.s, prog.h, atol=1e-7)


@pytest.mark.parametrize("seed", range(3))
def test_admm_matches_cvxpy_at_moderate_accuracy(seed):
    prog = random_socp(seed)
    res = conic.solve(prog, tol=1e-6, backend="admm")
    assert res.status is Status.OPTIMAL
    ref = cvxpy_objective(prog)
    assert abs(res.objective - ref) <= 1e-3 * max(1.0, abs(ref))


def test_ipm_matches_cvxopt_on_lp():
    cvxopt = pytest.importorskip("cvxopt")
    from cvxopt import matrix, solvers

    rng = np.random.default_rng(11)
    n, m = 5, 12
    G = rng.normal(size=(m, n))
    x0 = rng.normal(size=n)
    h = G @ x0 + rng.uniform(0.5, 1, m)
    c = -G.T @ rng.uniform(0.5, 1, m)
    solvers.options["show_progress"] = False
    ref = solvers.lp(matrix(c), matrix(G), matrix(h))
    prog = ConicProgram(c, sp.csc_matrix(G), h, [ConeSpec("nonneg", m)])
    res = conic.solve(prog, tol=1e-9)
    assert res.optimal
    assert abs(res.objective - ref["primal objective"]) <= 1e-6 * max(1.0, abs(ref["primal objective"]))


def test_builder_example_known_optimum():
    # min t  s.t. ||(x - 3, y + 4)|| <= t  ->  t = 0 at (3, -4)
    b = ProgramBuilder()
    x = b.var("x")
    y = b.var("y")
    t = b.var("t")
    b.add_objective(t, 1.0)
    b.soc([(np.array([t, x, y]), np.eye(3))], [0.0, -3.0, 4.0])
    prog = b.build()
    res = conic.solve(prog, tol=1e-9)
    assert res.optimal
    assert abs(res.objective) <= 1e-7
    np.testing.assert_allclose([prog.extract(res.x, "x"), prog.extract(res.x, "y")], [3.0, -4.0], atol=1e-6)


def test_infeasible_program_is_certified():
    b = ProgramBuilder()
    x = b.var("x")
    b.nonneg([(x, 1.0)], [-1.0])       # x >= 1
    b.nonneg([(x, -1.0)], [0.0])       # x <= 0
    prog = b.build()
    for backend in conic.BACKENDS:
        assert conic.solve(prog, backend=backend).status is Status.INFEASIBLE
    assert conic.check_feasible(prog) is Feasibility.INFEASIBLE
    assert not conic.check_feasible(prog)


def test_unbounded_program_is_certified():
    b = ProgramBuilder()
    x = b.var("x")
    b.add_objective(x, 1.0)
    b.nonneg([(x, -1.0)], [0.0])       # x <= 0, minimize x
    res = conic.solve(b.build())
    assert res.status is Status.UNBOUNDED


def test_indeterminate_counts_as_infeasible():
    prog = random_socp(0)
    f = conic.check_feasible(prog, max_iter=1)
    assert f is Feasibility.INDETERMINATE
    assert not f


def test_quad_cost_cone():
    b = ProgramBuilder()
    u = b.var("u", 3)
    b.add_objective(u, -np.ones(3))
    conic.quad_cost_as_cone(b, u, 12.0)
    res = conic.solve(b.build(), tol=1e-9)
    np.testing.assert_allclose(res.x, np.full(3, 2.0), atol=1e-6)
    with pytest.raises(ValueError):
        conic.quad_cost_as_cone(b, u, -1.0)


def test_dump_load_round_trip(tmp_path):
    prog = random_socp(3)
    path = tmp_path / "prog.txt"
    prog.dump(path)
    back = ConicProgram.load(path)
    np.testing.assert_array_equal(back.c, prog.c)
    np.testing.assert_array_equal(back.h, prog.h)
    assert (back.G != prog.G).nnz == 0
    assert back.cones == prog.cones


def test_malformed_programs_rejected():
    with pytest.raises(MalformedProgramError):
        ConicProgram(np.zeros(2), sp.csc_matrix((3, 2)), np.zeros(3), [ConeSpec("nonneg", 2)])
    with pytest.raises(ProgramDataError):
        ConicProgram(np.array([np.nan, 0]), sp.csc_matrix((1, 2)), np.zeros(1), [ConeSpec("nonneg", 1)])
    with pytest.raises(MalformedProgramError):
        ConeSpec("soc", 0)
    with pytest.raises(ValueError):
        conic.solve(random_socp(0), backend="simplex")
    b = ProgramBuilder()
    x = b.var("x", 2)
    with pytest.raises(MalformedProgramError):
        b.eq([(x, np.ones((3, 2)))], np.zeros(2))
