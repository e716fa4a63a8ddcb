from __future__ import annotations

import math

import numpy as np
import pytest

from ddto import scp
from ddto.model import double_integrator_discrete
from ddto.qcvx import Scenario, Target, run_ddto_qcvx, tree_report
from ddto.scp import (InvalidDilation, NonconvexScenario, ScpConfig, ScpRoundError, ScpSegment, ScpTree,
                      SizingError, initial_guess, reconstruct_time, run_ddto_scp, validate_continuous,
                      validation_passes, write_trace)

LEVEL = dict(z0=[0.0, 0.0, 10.0, 0.0, 0.0, 0.0], l_max=800.0)


def single_target(c_d=0.0):
    return NonconvexScenario(LEVEL["z0"], [[15.0, 0.0, 10.0, 0.0, 0.0, 0.0]], 7, LEVEL["l_max"], c_d=c_d)


def test_time_reconstruction():
    tm = reconstruct_time(s=[2.0, 4.0])
    np.testing.assert_allclose(tm.t, [0.0, 1.0, 3.0])
    assert tm.t_final == 3.0
    np.testing.assert_allclose(tm.to_physical([0.25, 0.75]), [0.5, 2.0])
    np.testing.assert_allclose(tm.to_normalized(tm.to_physical([0.1, 0.9])), [0.1, 0.9])
    with pytest.raises(InvalidDilation):
        reconstruct_time(s=[1.0, 0.0])


def test_config_validation():
    with pytest.raises(ValueError, match="eps"):
        ScpConfig(eps=0.0)
    with pytest.raises(ValueError):
        ScpConfig(s_min=5.0, s_max=1.0)
    with pytest.raises(ValueError, match="diverge"):
        ScpConfig(diverge_factor=1.0)
    assert ScpConfig().to_dict()["eps"] == 1e-5


@pytest.mark.parametrize("N, n", [(22, 2), (1, 1), (2, 1), (3, 4)])
def test_sizing_errors(N, n):
    targets = [[10.0 * (j + 1), 0.0, 10.0, 0.0, 0.0, 0.0] for j in range(n)]
    sc = NonconvexScenario(LEVEL["z0"], targets, N, 800.0)
    with pytest.raises(SizingError):
        run_ddto_scp(sc, N)


def test_scenario_validation():
    with pytest.raises(ValueError, match="u_min"):
        NonconvexScenario(LEVEL["z0"], [[1.0] * 6], 7, 800.0, u_min=30.0)
    with pytest.raises(ValueError, match="weight"):
        NonconvexScenario(LEVEL["z0"], [[1.0] * 6], 7, 800.0, constraint_weights=[1.0])
    with pytest.raises(ValueError):
        NonconvexScenario([0.0] * 5, [[1.0] * 6], 7, 800.0)
    sc = NonconvexScenario(LEVEL["z0"], [[1.0] * 6], 7, 800.0)
    assert sc.z0.shape == (7,) and sc.z0[6] == 0.0


def test_initial_guess_layout():
    sc = NonconvexScenario(LEVEL["z0"], [[15.0, -5, 10, 0, 0, 0], [15.0, 5, 10, 0, 0, 0]], 7, 800.0)
    cfg = ScpConfig(perturb=0.1, seed=3)
    a = initial_guess(sc, [0, 1], sc.z0, 4, cfg)
    b = initial_guess(sc, [0, 1], sc.z0, 4, cfg)
    assert len(a.X) == 3 and a.M == 4 and a.block(1) == 2
    for Xa, Xb in zip(a.X, b.X):
        np.testing.assert_array_equal(Xa, Xb)
    np.testing.assert_array_equal(a.X[0][0, :7], sc.z0)
    assert np.all(a.U[0][:, 3] > 0)


def test_segment_round_trip():
    rng = np.random.default_rng(0)
    seg = ScpSegment(rng.normal(size=(4, 9)), np.abs(rng.normal(size=(3, 4))) + 0.1, 1.5)
    back = ScpSegment.from_dict(seg.to_dict())
    np.testing.assert_array_equal(back.aug_states, seg.aug_states)
    np.testing.assert_array_equal(back.aug_inputs, seg.aug_inputs)
    assert back.t0 == 1.5
    assert back.times[0] == 1.5 and back.t1 == pytest.approx(1.5 + np.sum(seg.dilation) / 3)


def test_first_round_failure_raises(monkeypatch):
    sc = NonconvexScenario(LEVEL["z0"], [[15.0, -5, 10, 0, 0, 0], [15.0, 5, 10, 0, 0, 0]], 7, 800.0)
    cfg = ScpConfig()

    def fail(sc_, J, z0, M, cfg_, init=None, has_trunk=None):
        it = initial_guess(sc_, J, z0, M, cfg_, has_trunk)
        return scp.ScpResult(it, False, [{"defect": 1.0, "step": 1.0, "terminal": 1.0}])

    monkeypatch.setattr(scp, "scp_solve", fail)
    with pytest.raises(ScpRoundError) as err:
        run_ddto_scp(sc, 7, cfg)
    assert err.value.round_index == 1
    assert "no convergence" in str(err.value)


def test_later_round_failure_reuses_last_branch_point(monkeypatch):
    sc = NonconvexScenario(LEVEL["z0"], [[15.0, -5, 10, 0, 0, 0], [15.0, 5, 10, 0, 0, 0],
                                         [15.0, 0, 10, 0, 0, 0]], 7, 800.0)
    calls = []

    def fake(sc_, J, z0, M, cfg_, init=None, has_trunk=None):
        it = initial_guess(sc_, J, z0, M, cfg_, has_trunk)
        calls.append(list(J))
        return scp.ScpResult(it, len(calls) == 1, [])

    monkeypatch.setattr(scp, "scp_solve", fake)
    tree = run_ddto_scp(sc, 7, ScpConfig())
    r1, r2 = tree.meta["rounds"]
    assert r1["converged"] and not r2["converged"]
    assert r2["coincident_with"] == 1
    assert len(tree.trunks) == 1
    t_b = tree.branch_times[2]
    assert tree.branch_times == {0: t_b, 1: t_b, 2: t_b}
    for j in range(3):
        np.testing.assert_array_equal(tree.branches[j].states[0], tree.trunks[0].states[-1])


def test_single_target_matches_discrete_double_integrator():
    """Without drag, each SCP interval is an exact zero-order-hold double-integrator step."""
    sc = single_target()
    tree = run_ddto_scp(sc, 7)
    rep = validate_continuous(tree, sc, 50)
    assert validation_passes(rep, sc)["all"]
    assert rep["terminal_error"][0] <= 1e-6
    T, X, U, S = tree.full_path(0)
    dts = np.diff(T)
    np.testing.assert_allclose(dts, S / (len(S)), rtol=1e-12)
    for k in range(len(U)):
        step = double_integrator_discrete(dts[k], sc.a).step(X[k, :6], U[k])
        np.testing.assert_allclose(step, X[k + 1, :6], rtol=0, atol=1e-9)

    # the convex method on the same grid (uniform step) is feasible as well, with the same bounds
    dt = float(T[-1]) / (len(T) - 1)
    dsc = Scenario(double_integrator_discrete(dt, sc.a), sc.z0[:6], [Target.point(sc.targets[0])], [len(T)],
                   u_max=sc.u_max, u_min=sc.u_min, e=sc.e, delta_max_deg=sc.delta_max_deg, l_max=sc.l_max / dt)
    crep = tree_report(run_ddto_qcvx(dsc), dsc)
    assert crep["terminal_error"][0] <= 1e-6 and crep["inputs_ok"]
    assert crep["cost"][0] * dt <= sc.l_max * (1 + 1e-6)


def test_diverging_free_phase_switches_to_guarded_steps():
    """A perturbed start makes the unguarded steps blow up; the blow-up is rejected, not accepted."""
    sc = NonconvexScenario(LEVEL["z0"], [[15.0, -5, 10, 0, 0, 0], [15.0, 5, 10, 0, 0, 0]], 7, LEVEL["l_max"])
    cfg = ScpConfig(perturb=0.01, seed=7)
    res = scp.scp_solve(sc, [0, 1], sc.z0, 4, cfg)
    assert res.converged
    assert res.iterate.defect <= cfg.defect_tol and res.iterate.terminal <= cfg.defect_tol
    first = next(r for r in res.trace if r["guarded"])
    best = min(r["defect"] for r in res.trace if r["iteration"] < first["iteration"])
    assert first["defect"] > cfg.diverge_factor * max(best, cfg.diverge_floor)
    assert first["accepted"] is False
    assert max(r["defect"] for r in res.trace if r["accepted"]) < first["defect"]


def test_trace_written(tmp_path):
    sc = single_target()
    res = scp.scp_solve(sc, [0], sc.z0, 7, ScpConfig(), has_trunk=False)
    assert res.converged
    path = tmp_path / "trace.csv"
    write_trace(res.trace, path)
    head, *rows = path.read_text().splitlines()
    assert head.split(",") == scp.TRACE_FIELDS
    assert len(rows) == len(res.trace)


def test_nonconvex_tree_structure(nonconvex_tree, nonconvex_problem):
    tree, cfg, _ = nonconvex_tree
    sc, _ = nonconvex_problem
    rounds = tree.meta["rounds"]
    assert [r["J"][-1] for r in rounds] == [3, 2, 1]
    assert rounds[0]["converged"]
    # every later round either converged or was marked as coinciding with an earlier one
    for r in rounds[1:]:
        assert r["converged"] or r["coincident_with"] < r["round"]
    times = [tree.branch_times[j] for j in sc.priorities]
    assert all(a >= b for a, b in zip(times, times[1:]))
    assert times[-1] > 0
    for tr in tree.trunks:
        assert np.all(tr.dilation >= cfg.s_min * (1 - 1e-6)) and np.all(tr.dilation <= cfg.s_max * (1 + 1e-6))
    # branches depart from the state where their trunk ends
    for j, br in tree.branches.items():
        prior = [t for t in tree.trunks if t.t0 < tree.branch_times[j]]
        if prior:
            np.testing.assert_allclose(br.states[0], prior[-1].states[-1], atol=1e-9)


def test_nonconvex_tree_serialization(nonconvex_tree):
    tree, _, _ = nonconvex_tree
    back = ScpTree([ScpSegment.from_dict(s.to_dict()) for s in tree.trunks],
                   {j: ScpSegment.from_dict(s.to_dict()) for j, s in tree.branches.items()},
                   dict(tree.branch_times), list(tree.priorities))
    for j in tree.branches:
        for a, b in zip(tree.full_path(j), back.full_path(j)):
            np.testing.assert_array_equal(a, b)
    assert not math.isnan(tree.branch_times[0])
