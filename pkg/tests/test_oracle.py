from __future__ import annotations

import numpy as np
import pytest

from ddto import oracle
from ddto.oracle import (BudgetExceeded, GridSystem, UndefinedBranchTime, backward_reach, branch_time_oracle,
                         check_theorems, enumerate_trajectories, exhaustive_ddto, forward_reach,
                         integrator_instance, k_reach, lambda_sets)


def line(targets=(2, -2), N=4):
    return integrator_instance(-3, 3, 0, list(targets), N)


def test_forward_and_backward_reach_on_integrator():
    g = line()
    assert forward_reach(g, 0, (0,)) == {(0,)}
    assert forward_reach(g, 2, (0,)) == {(x,) for x in range(-2, 3)}
    assert forward_reach(g, 6, (3,)) == {(x,) for x in range(-3, 4)}       # clipped by the box
    assert backward_reach(g, 1, {(3,)}) == {(2,), (3,)}
    assert forward_reach(g, 1, (99,)) == frozenset()
    with pytest.raises(ValueError):
        forward_reach(g, -1, (0,))


def test_k_reach_matches_hand_computation():
    g = line((2,), 3)
    # x1 = 0, x3 = 2 within steps of one: x2 must be 1
    assert k_reach(g, 0, 1) == {(0,)}
    assert k_reach(g, 0, 2) == {(1,)}
    assert k_reach(g, 0, 3) == {(2,)}
    with pytest.raises(ValueError):
        k_reach(g, 0, 4)


def test_branch_time_for_diverging_targets():
    # targets 2 and -2 with N = 3 from 0: only the first state can be shared
    g = line((2, -2), 3)
    assert branch_time_oracle(g, [0, 1]) == 1
    g = line((1, -1), 4)
    assert branch_time_oracle(g, [0, 1]) == 3
    assert branch_time_oracle(g, [0]) == 4
    assert (0, 1) in lambda_sets(g, 3)
    assert (0, 1) not in lambda_sets(g, 4)


def test_unreachable_target_has_no_branch_time():
    g = line((3,), 2)
    with pytest.raises(UndefinedBranchTime):
        branch_time_oracle(g, [0])


def test_enumeration_counts_paths():
    g = line((1,), 3)
    T = enumerate_trajectories(g, 0)
    # two steps from 0 to 1: (+1, 0) or (0, +1)
    assert len(T) == 2
    assert {tuple(t[:, 0]) for t in T} == {(0, 1, 1), (0, 0, 1)}
    with pytest.raises(BudgetExceeded):
        enumerate_trajectories(integrator_instance(-9, 9, 0, [0], 5), None, budget=10)


def test_exhaustive_counting_identity_and_anchor_tie():
    g = line((1, -1), 4)
    res = exhaustive_ddto(g)
    n, N = g.n_targets, g.N
    assert res.objective + sum(len(J) for J in res.J) == n * N
    assert res.anchor == 0                                   # symmetric problem: ties go to the lower index
    assert res.per_anchor[0] == res.per_anchor[1]
    assert res.branch_times[1] == 3
    assert all(res.J[k] <= res.J[k - 1] for k in range(1, N))


def test_restricted_input_certificate():
    cert = oracle.restricted_input_certificate()
    assert cert == {"(3,9) in F_1(z0)": True, "(4,8) in F_2(z0)": True, "(4,8) not in F_1((3,9))": True}


@pytest.mark.parametrize("seed", range(20))
def test_theorem_battery_on_random_instances(seed):
    g = oracle.random_instance(seed)
    assert g.n_targets <= 3 and g.N <= 5 and len(g.inputs) <= 3
    rep = check_theorems(g)
    assert rep.passed, rep.details


def test_theorem_battery_detects_broken_instance(monkeypatch):
    g = line((1, -1), 4)
    real = oracle.k_reach
    # corrupt the reach sets: the enumeration no longer agrees with them
    monkeypatch.setattr(oracle, "k_reach", lambda s, j, k: frozenset() if k == 2 else real(s, j, k))
    rep = check_theorems(g)
    assert not rep.passed
    with pytest.raises(oracle.TheoremViolation):
        check_theorems(g, raise_on_fail=True)


def test_grid_serialization_round_trip(tmp_path):
    g = oracle.random_instance(7)
    path = tmp_path / "g.json"
    g.save(path)
    back = GridSystem.load(path)
    assert back.to_dict() == g.to_dict()
    assert branch_time_oracle(back, range(back.n_targets)) == branch_time_oracle(g, range(g.n_targets))


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSystem([(0,)], [(0,)], {}, [{(0,)}], (1,), 2)
    with pytest.raises(ValueError):
        GridSystem([(0,)], [(0,)], {}, [{(0,)}], (0,), 0)


def test_corpora_are_deterministic():
    a = [g.to_json() for g in oracle.corpus(5)]
    b = [g.to_json() for g in oracle.corpus(5)]
    assert a == b
    assert all(g.embedding and g.embedding["kind"] == "integrator" for g in oracle.convex_corpus(5))
    assert np.all([g.n_targets >= 1 for g in oracle.corpus(5)])
