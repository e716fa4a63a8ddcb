from __future__ import annotations

import math

import pytest

from ddto import oracle
from ddto.micp import (MicpInstance, ScenarioInfeasible, best_anchor, build_micp, extract_target_sets, micp_tree,
                       solve_micp, sum_J)
from ddto.qcvx import scenario_from_grid


def micro(seed=1003):
    g = oracle.convex_corpus(1, seed)[0]
    return g, scenario_from_grid(g)


def three_targets():
    g = oracle.integrator_instance(-3, 3, 0, [2, 1, -1], 5)
    return g, scenario_from_grid(g)


def test_matches_exhaustive_for_every_anchor():
    g, sc = three_targets()
    for i in range(g.n_targets):
        _, res = solve_micp(sc, i, presolve=False)
        assert res.converged
        assert res.objective == oracle.exhaustive_ddto(g, anchor=i).objective


@pytest.mark.parametrize("p", [1, 2, math.inf])
def test_norm_choice_does_not_change_optimum(p):
    g, sc = three_targets()
    _, res = solve_micp(sc, 0, p_norm=p)
    assert res.objective == oracle.exhaustive_ddto(g, anchor=0).objective


def test_presolve_keeps_optimum_and_prunes():
    g, sc = three_targets()
    plain = build_micp(sc, 0)
    pre = build_micp(sc, 0, presolve=True)
    assert pre.forced_one and not plain.forced_one
    _, a = solve_micp(sc, 0, presolve=False)
    _, b = solve_micp(sc, 0, presolve=True)
    assert a.objective == b.objective
    assert b.nodes <= a.nodes


def test_small_big_M_is_doubled():
    g, sc = three_targets()
    _, res = solve_micp(sc, 0, big_M=0.5)
    assert res.big_M > 0.5
    assert res.objective == oracle.exhaustive_ddto(g, anchor=0).objective


def test_counting_identity_and_tree():
    g, sc = three_targets()
    inst, res = solve_micp(sc, 0)
    ts = extract_target_sets(inst, res)
    total = sum(inst.horizons.values())
    assert res.objective + sum(len(J) - 1 for J in ts.J) == total
    assert all(ts.J[k] <= ts.J[k - 1] for k in range(1, len(ts.J)))
    tree = micp_tree(inst, res)
    assert tree.sum_J() == sum_J(inst, res)
    assert tree.branch_times[0] == sc.horizons[0]


def test_best_anchor_ties_go_to_lowest_index():
    g, sc = micro()
    i, inst, res, objs = best_anchor(sc)
    ex = oracle.exhaustive_ddto(g)
    assert i == ex.anchor
    assert objs == {a: float(v) for a, v in ex.per_anchor.items()}


def test_time_budget_reports_bound():
    _, sc = three_targets()
    _, res = solve_micp(sc, 0, presolve=False, time_budget=1e-9)
    assert res.bound <= res.objective
    assert res.gap >= 0
    assert len(res.log) == 1            # the root is always processed


def test_bnb_log_export(tmp_path):
    _, sc = three_targets()
    _, res = solve_micp(sc, 0)
    path = tmp_path / "log.csv"
    res.export_log(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "node,depth,bound,status,incumbent"
    assert len(lines) == len(res.log) + 1


def test_instance_validation():
    _, sc = three_targets()
    with pytest.raises(ValueError):
        build_micp(sc, 0, big_M=-1.0)
    with pytest.raises(ValueError):
        MicpInstance(sc, 0, 1.0, 3, {}, {})


def test_infeasible_scenario_is_reported():
    g = oracle.integrator_instance(-3, 3, 0, [3, -1], 2)
    with pytest.raises(ScenarioInfeasible):
        solve_micp(scenario_from_grid(g), 1, max_doublings=1)
