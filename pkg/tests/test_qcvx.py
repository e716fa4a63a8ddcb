from __future__ import annotations

import numpy as np
import pytest

from ddto import oracle
from ddto.model import double_integrator_discrete
from ddto.qcvx import (BudgetExhausted, Scenario, Target, check_assumption, coincidence_horizon,
                       compare_with_oracle, max_branch_time, quad_convex_scenario, run_ddto_qcvx,
                       scenario_from_grid, tree_report)

A = (0.0, 0.0, -9.806)


def integrator(targets=(1, -1), N=4):
    return scenario_from_grid(oracle.integrator_instance(-3, 3, 0, list(targets), N))


def test_coincidence_horizon():
    a = np.zeros((5, 2))
    b = a.copy()
    b[3:] = 1.0
    assert coincidence_horizon([a, b]) == 3
    assert coincidence_horizon([a, a]) == 5
    b[0] = 1.0
    assert coincidence_horizon([a, b]) == 0


def test_bisection_known_branch_time():
    sc = integrator((1, -1), 4)
    res = max_branch_time([0, 1], sc.horizons, sc.z0, None, sc)
    assert res.k == 3
    assert res.feasible_at(3) and res.feasible_at(4) is False
    X0, _ = res.solution[0]
    X1, _ = res.solution[1]
    assert coincidence_horizon([X0, X1], tol=1e-6) >= 3
    np.testing.assert_allclose(X0[-1], [1.0], atol=1e-6)
    np.testing.assert_allclose(X1[-1], [-1.0], atol=1e-6)


def test_separate_inputs_give_same_branch_time():
    sc = integrator((2, -1), 5)
    a = max_branch_time([0, 1], sc.horizons, sc.z0, None, sc, realize=False)
    b = max_branch_time([0, 1], sc.horizons, sc.z0, None, sc, shared_inputs=False, realize=False)
    assert a.k == b.k == oracle.branch_time_oracle(oracle.integrator_instance(-3, 3, 0, [2, -1], 5), [0, 1])


def test_agreement_with_reach_set_oracle_on_small_corpus():
    for g in oracle.convex_corpus(8):
        for row in compare_with_oracle(g):
            assert row["agree"], row


def test_unreachable_targets_violate_assumption():
    sc = integrator((3,), 2)
    assert not check_assumption(sc)["all_feasible"]


def test_box_and_ball_targets():
    sys_ = double_integrator_discrete(0.5, A)
    targets = [Target.box([9, -1, 0, -0.5, -0.5, -0.5], [11, 1, 0, 0.5, 0.5, 0.5]),
               Target.ball([10, 5, 0, 0, 0, 0], 0.5)]
    sc = Scenario(sys_, [0, 0, 10, 0, 0, 0], targets, [12, 12], u_max=20.0, u_min=5.0, e=[0, 0, 1],
                  delta_max_deg=60.0, l_max=2000.0)
    tree = run_ddto_qcvx(sc)
    rep = tree_report(tree, sc)
    assert max(rep["terminal_error"].values()) <= 1e-6
    assert rep["dynamics_defect"] <= 1e-8
    assert rep["inputs_ok"]
    assert Target.box([0], [1]).distance([2.0]) == 1.0
    assert Target.ball([0, 0], 1.0).distance([3.0, 4.0]) == 4.0


def test_tree_structure_and_budget_bookkeeping(convex_tree, convex_problem):
    tree, _ = convex_tree
    bts = tree.branch_times
    rounds = tree.meta["rounds"]
    assert [r["J"][-1] for r in rounds] == [3, 2, 1]
    assert bts[3] <= bts[2] <= bts[1] == bts[0]
    for prev, cur in zip(rounds, rounds[1:]):
        assert cur["budget"] == pytest.approx(prev["budget"] - prev["trunk_cost"], rel=1e-12)
    for j in tree.branches:
        X, U = tree.full_path(j)
        assert len(X) == convex_problem.horizons[j]
        assert len(U) == len(X) - 1


def test_exhausted_budget_is_reported():
    with pytest.raises(BudgetExhausted):
        run_ddto_qcvx(quad_convex_scenario(l_max=100.0))


def test_single_target_tree():
    sc = integrator((2,), 4)
    tree = run_ddto_qcvx(sc)
    X, U = tree.full_path(0)
    assert len(X) == 4 and tree.sum_J() == 4


@pytest.mark.parametrize("kw, msg", [
    (dict(priorities=[0, 0]), "permutation"),
    (dict(horizons=[5]), "horizon"),
    (dict(u_min=30.0), "u_min"),
    (dict(delta_max_deg=95.0), "delta_max"),
    (dict(z0=[0.0, 0.0]), "z0"),
])
def test_scenario_validation(kw, msg):
    base = dict(system=double_integrator_discrete(0.5, A), z0=np.zeros(6),
                targets=[Target.point(np.zeros(6)), Target.point(np.ones(6))], horizons=[5, 5], u_max=20.0)
    base.update(kw)
    with pytest.raises(ValueError, match=msg):
        Scenario(**base)
