"""Brute-force ground truth on finite systems.

States and inputs are integer tuples and the dynamics are an explicit
transition table, so every reachable-set and cardinality computation here is
exact.  A trajectory of horizon ``N`` is a state sequence ``x_1..x_N`` with
``x_1 = z0`` driven by ``N - 1`` inputs.  Times are 1-based throughout.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

State = tuple[int, ...]

DEFAULT_BUDGET = 10 ** 7


class BudgetExceeded(RuntimeError):
    """Enumeration would exceed the configured trajectory budget."""


class UndefinedBranchTime(ValueError):
    """The target collection is not jointly reachable even at k = 1."""


class TheoremViolation(AssertionError):
    """A checked statement failed; ``dump`` holds a replayable counterexample."""

    def __init__(self, msg: str, dump: dict):
        super().__init__(msg)
        self.dump = dump


def _t(v) -> State:
    return tuple(int(a) for a in np.atleast_1d(v))


@dataclass
class GridSystem:
    """Finite-state system with an explicit transition table.

    ``transitions[(x, u)]`` is the successor of admissible state ``x`` under
    admissible input ``u``; missing pairs leave the admissible set ``X``.
    ``states`` is ``X`` itself and every listed input is in ``U``.
    ``embedding`` optionally records how the instance maps to a continuous
    affine system (used by the convex-method equivalence tests).
    """

    states: list[State]
    inputs: list[State]
    transitions: dict[tuple[State, State], State]
    targets: list[frozenset]
    z0: State
    N: int
    embedding: dict | None = None
    _succ: dict = field(default=None, init=False, repr=False, compare=False)
    _pred: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.states = [_t(s) for s in self.states]
        self.inputs = [_t(u) for u in self.inputs]
        self.z0 = _t(self.z0)
        self.targets = [frozenset(_t(z) for z in T) for T in self.targets]
        X = set(self.states)
        if self.z0 not in X:
            raise ValueError("z0 must be an admissible state")
        if self.N < 1:
            raise ValueError("horizon must be >= 1")
        self.transitions = {(_t(x), _t(u)): _t(y) for (x, u), y in self.transitions.items()
                            if _t(x) in X and _t(y) in X and _t(u) in set(self.inputs)}
        succ: dict[State, list[tuple[State, State]]] = {s: [] for s in self.states}
        pred: dict[State, set] = {s: set() for s in self.states}
        for (x, u), y in sorted(self.transitions.items()):
            succ[x].append((u, y))
            pred[y].add(x)
        self._succ, self._pred = succ, pred

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    @classmethod
    def from_function(cls, states: Iterable, inputs: Iterable, step: Callable, targets, z0, N,
                      admissible: Callable | None = None, embedding: dict | None = None) -> "GridSystem":
        states = [_t(s) for s in states]
        if admissible is not None:
            states = [s for s in states if admissible(s)]
        X = set(states)
        inputs = [_t(u) for u in inputs]
        trans = {}
        for x in states:
            for u in inputs:
                y = _t(step(np.array(x), np.array(u)))
                if y in X:
                    trans[(x, u)] = y
        return cls(states, inputs, trans, targets, z0, N, embedding)

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "states": [list(s) for s in self.states],
            "inputs": [list(u) for u in self.inputs],
            "transitions": [[list(x), list(u), list(y)] for (x, u), y in sorted(self.transitions.items())],
            "targets": [sorted(list(z) for z in T) for T in self.targets],
            "z0": list(self.z0),
            "N": self.N,
            "embedding": self.embedding,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSystem":
        trans = {(_t(x), _t(u)): _t(y) for x, u, y in d["transitions"]}
        return cls(d["states"], d["inputs"], trans, d["targets"], d["z0"], int(d["N"]), d.get("embedding"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, s: str) -> "GridSystem":
        return cls.from_dict(json.loads(s))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "GridSystem":
        return cls.from_json(Path(path).read_text())


# --------------------------------------------------------------------------
# reachable sets


def forward_reach(sys: GridSystem, M: int, z) -> frozenset:
    """Terminal states of feasible M-step trajectories from ``z``."""
    if M < 0:
        raise ValueError("M must be nonnegative")
    z = _t(z)
    if z not in sys._succ:
        return frozenset()
    cur = {z}
    for _ in range(M):
        cur = {y for x in cur for _, y in sys._succ[x]}
    return frozenset(cur)


def backward_reach(sys: GridSystem, M: int, Z) -> frozenset:
    """Initial states of feasible M-step trajectories ending in ``Z``."""
    if M < 0:
        raise ValueError("M must be nonnegative")
    cur = {_t(z) for z in Z} & set(sys.states)
    for _ in range(M):
        cur = {x for y in cur for x in sys._pred[y]}
    return frozenset(cur)


def k_reach(sys: GridSystem, j: int, k: int) -> frozenset:
    """States at time ``k`` on some feasible horizon-N trajectory from z0 to target ``j`` (0-based j)."""
    if not 1 <= k <= sys.N:
        raise ValueError(f"k must lie in [1, {sys.N}]")
    return forward_reach(sys, k - 1, sys.z0) & backward_reach(sys, sys.N - k, sys.targets[j])


def k_reach_J(sys: GridSystem, J: Iterable[int], k: int) -> frozenset:
    J = list(J)
    if not J:
        raise ValueError("J must be nonempty")
    out = k_reach(sys, J[0], k)
    for j in J[1:]:
        out = out & k_reach(sys, j, k)
    return out


def _subsets(n: int):
    for r in range(1, n + 1):
        yield from itertools.combinations(range(n), r)


def lambda_sets(sys: GridSystem, k: int) -> set[tuple[int, ...]]:
    """All nonempty target subsets (as sorted tuples) whose k-reach sets intersect."""
    per = [k_reach(sys, j, k) for j in range(sys.n_targets)]
    out = set()
    for J in _subsets(sys.n_targets):
        S = per[J[0]]
        for j in J[1:]:
            S = S & per[j]
        if S:
            out.add(J)
    return out


def branch_time_oracle(sys: GridSystem, J: Iterable[int]) -> int:
    """Latest time at which the targets in ``J`` are jointly reachable."""
    J = tuple(sorted(J))
    if not k_reach_J(sys, J, 1):
        raise UndefinedBranchTime(f"targets {J} are not jointly reachable from z0")
    best = 1
    for k in range(1, sys.N + 1):
        if k_reach_J(sys, J, k):
            best = k
    return best


# --------------------------------------------------------------------------
# enumeration


def enumerate_trajectories(sys: GridSystem, j: int | None = None, budget: int = DEFAULT_BUDGET) -> np.ndarray:
    """All feasible horizon-N state sequences from z0 (to target ``j`` if given).

    Returns an integer array of shape ``(count, N, n_x)``. Uses plain depth
    first enumeration over input sequences, without reach-set pruning, so it
    is independent of the set computations above.
    """
    n_in = max(1, len(sys.inputs))
    if n_in ** (sys.N - 1) > budget:
        raise BudgetExceeded(f"{n_in}^{sys.N - 1} input sequences exceed budget {budget}")
    target = sys.targets[j] if j is not None else None
    out = []
    stack = [(sys.z0,)]
    while stack:
        path = stack.pop()
        if len(path) == sys.N:
            if target is None or path[-1] in target:
                out.append(path)
            continue
        for _, y in reversed(sys._succ[path[-1]]):
            stack.append(path + (y,))
    dim = len(sys.z0)
    if not out:
        return np.zeros((0, sys.N, dim), dtype=int)
    # de-duplicate (distinct inputs may give the same state path)
    uniq = sorted(set(out))
    return np.array(uniq, dtype=int).reshape(len(uniq), sys.N, dim)


def coincidence_horizon_exact(trajs: list[np.ndarray]) -> int:
    """Largest k with all sequences equal at times 1..k (1-based)."""
    if not trajs:
        raise ValueError("need at least one trajectory")
    L = min(len(t) for t in trajs)
    k = 0
    while k < L and all(np.array_equal(trajs[0][k], t[k]) for t in trajs[1:]):
        k += 1
    return k


def max_coincidence_enumerated(sys: GridSystem, J: Iterable[int], budget: int = DEFAULT_BUDGET,
                               cache: dict | None = None) -> int:
    """max over feasible trajectories (one per j in J) of their common-prefix length.

    Computed from prefix sets of enumerated trajectories: the answer is the
    largest k such that some length-k prefix is shared by a trajectory to
    every target in J. Returns 0 when some target has no trajectory.
    """
    cache = {} if cache is None else cache
    best = 0
    prefix_sets = []
    for j in J:
        if j not in cache:
            cache[j] = enumerate_trajectories(sys, j, budget)
        T = cache[j]
        if len(T) == 0:
            return 0
        prefix_sets.append(T)
    for k in range(1, sys.N + 1):
        common = None
        for T in prefix_sets:
            P = {tuple(map(tuple, t[:k])) for t in T}
            common = P if common is None else common & P
            if not common:
                break
        if common:
            best = k
        else:
            break
    return best


@dataclass
class ExhaustiveResult:
    anchor: int                          # 0-based
    objective: int
    trajectories: list[np.ndarray]       # one (N, n_x) per target
    J: list[frozenset]                   # J_1..J_N (0-based target indices, anchor included)
    branch_times: list[int]              # per target, max{k : j in J_k}
    per_anchor: dict[int, int] = field(default_factory=dict)


def _mismatch_matrix(Ti: np.ndarray, Tj: np.ndarray) -> np.ndarray:
    """counts[a, b] = number of times where Ti[a] and Tj[b] differ."""
    eq = np.all(Ti[:, None, :, :] == Tj[None, :, :, :], axis=-1)
    return Ti.shape[1] - eq.sum(axis=-1)


def exhaustive_ddto(sys: GridSystem, anchor: int | None = None, budget: int = DEFAULT_BUDGET) -> ExhaustiveResult:
    """Exact minimizer of the anchored mismatch-count objective.

    With ``anchor=None`` every anchor is tried and the smallest objective wins
    (ties go to the smallest index).  Given the anchor trajectory the
    objective separates over the other targets, so each is minimized
    independently; the outer minimization over anchor trajectories is
    exhaustive.
    """
    n = sys.n_targets
    trajs = [enumerate_trajectories(sys, j, budget) for j in range(n)]
    for j, T in enumerate(trajs):
        if len(T) == 0:
            raise UndefinedBranchTime(f"target {j} is unreachable within the horizon")
    total = sum(len(trajs[i]) * sum(len(T) for T in trajs) for i in range(n))
    if total > budget:
        raise BudgetExceeded(f"pairwise comparisons {total} exceed budget {budget}")
    anchors = range(n) if anchor is None else [anchor]
    results = {}
    for i in anchors:
        Ti = trajs[i]
        score = np.zeros(len(Ti), dtype=int)
        choice = {}
        for j in range(n):
            if j == i:
                continue
            mm = _mismatch_matrix(Ti, trajs[j])
            choice[j] = np.argmin(mm, axis=1)           # first minimizer: deterministic
            score += mm[np.arange(len(Ti)), choice[j]]
        a = int(np.argmin(score))
        sel = [Ti[a] if j == i else trajs[j][choice[j][a]] for j in range(n)]
        results[i] = (int(score[a]), sel)
    i_star = min(results, key=lambda i: (results[i][0], i))
    obj, sel = results[i_star]
    J = [frozenset(j for j in range(n) if np.array_equal(sel[j][k], sel[i_star][k])) for k in range(sys.N)]
    bt = [max((k + 1 for k in range(sys.N) if j in J[k]), default=0) for j in range(n)]
    if obj + sum(len(Jk) for Jk in J) != n * sys.N:
        raise TheoremViolation("counting identity violated", {"instance": sys.to_dict()})
    return ExhaustiveResult(i_star, obj, sel, J, bt, {i: r[0] for i, r in results.items()})


# --------------------------------------------------------------------------
# theorem battery


@dataclass
class TheoremReport:
    checks: dict[str, bool]
    details: dict[str, str] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


def check_theorems(sys: GridSystem, budget: int = DEFAULT_BUDGET, raise_on_fail: bool = False) -> TheoremReport:
    """Machine-check the reachability and tree-structure statements on one instance.

    Checks:
      branch_time      coincidence maximum by enumeration equals the reach-set branch time, all J
      k_reach_monotone nonempty k-reach sets propagate to earlier k, empty ones to later k
      passes_k_reach   every feasible trajectory to j lies in R^j_k at each k
      recursion        F_M(z) is the one-step image of F_{M-1}(z)
      duality          y in F_M(z)  <=>  z in B_M({y})
      nested_one_step  along feasible trajectories, F_1(x_{k-1}) is inside F_{k-1}(z0)
      monotone_sets    J_k is contained in J_{k-1} for every exhaustive optimum (each anchor)
      no_recoincide    no target re-coincides with its anchor after its branch time
      counting         objective + sum |J_k| = n N
      anchored_value   anchored optimum equals n N minus the best achievable sum of |J_k|
    """
    n, N = sys.n_targets, sys.N
    checks: dict[str, bool] = {}
    details: dict[str, str] = {}
    cache: dict[int, np.ndarray] = {}
    reach = {(j, k): k_reach(sys, j, k) for j in range(n) for k in range(1, N + 1)}

    ok = True
    for J in _subsets(n):
        inter = [frozenset.intersection(*[reach[(j, k)] for j in J]) for k in range(1, N + 1)]
        enum = max_coincidence_enumerated(sys, J, budget, cache)
        if not inter[0]:
            ok &= enum == 0
            continue
        oracle = max(k for k in range(1, N + 1) if inter[k - 1])
        if enum != oracle:
            ok = False
            details["branch_time"] = f"J={J}: enumeration {enum} vs reach sets {oracle}"
    checks["branch_time"] = ok

    ok = True
    for J in _subsets(n):
        ne = [bool(frozenset.intersection(*[reach[(j, k)] for j in J])) for k in range(1, N + 1)]
        # nonempty at k => nonempty at all earlier k (pattern is a prefix of Trues)
        first_false = ne.index(False) if False in ne else N
        if any(ne[first_false:]):
            ok = False
            details["k_reach_monotone"] = f"J={J}: pattern {ne}"
    checks["k_reach_monotone"] = ok

    ok = True
    for j in range(n):
        if j not in cache:
            cache[j] = enumerate_trajectories(sys, j, budget)
        for t in cache[j]:
            for k in range(1, N + 1):
                if _t(t[k - 1]) not in reach[(j, k)]:
                    ok = False
                    details["passes_k_reach"] = f"target {j} trajectory {t.tolist()} at k={k}"
    checks["passes_k_reach"] = ok

    ok_rec = ok_dual = True
    F = {0: forward_reach(sys, 0, sys.z0)}
    for M in range(1, N):
        F[M] = forward_reach(sys, M, sys.z0)
        step = frozenset(y for x in F[M - 1] for y in forward_reach(sys, 1, x))
        ok_rec &= step == F[M]
        for y in sys.states:
            ok_dual &= (y in F[M]) == (sys.z0 in backward_reach(sys, M, {y}))
    checks["recursion"] = ok_rec
    checks["duality"] = ok_dual

    ok = True
    all_traj = enumerate_trajectories(sys, None, budget)
    for t in all_traj:
        for k in range(2, N + 1):
            if not forward_reach(sys, 1, _t(t[k - 2])) <= F[k - 1]:
                ok = False
    checks["nested_one_step"] = ok

    ok_mono = ok_rec2 = ok_count = ok_val = True
    if all(len(cache[j]) for j in range(n)):
        for i in range(n):
            res = exhaustive_ddto(sys, anchor=i, budget=budget)
            Js = res.J
            ok_mono &= all(Js[k] <= Js[k - 1] for k in range(1, N))
            for j in range(n):
                kj = res.branch_times[j]
                after = [np.array_equal(res.trajectories[j][k], res.trajectories[i][k]) for k in range(kj, N)]
                ok_rec2 &= not any(after)
            ok_count &= res.objective + sum(len(J) for J in Js) == n * N
            # best achievable sum |J_k| over anchor-i trajectories, by direct enumeration
            Ti = cache[i]
            best_sum = 0
            for t in Ti:
                s = N
                for j in range(n):
                    if j == i:
                        continue
                    eq = np.all(cache[j] == t[None], axis=-1).sum(axis=1)
                    s += int(eq.max())
                best_sum = max(best_sum, s)
            ok_val &= res.objective == n * N - best_sum
    checks["monotone_sets"] = ok_mono
    checks["no_recoincide"] = ok_rec2
    checks["counting"] = ok_count
    checks["anchored_value"] = ok_val

    report = TheoremReport(checks, details)
    if raise_on_fail and not report.passed:
        failed = [k for k, v in checks.items() if not v]
        raise TheoremViolation(f"failed checks {failed}", {"instance": sys.to_dict(), "details": details})
    return report


# --------------------------------------------------------------------------
# instance generators


def restricted_input_instance(N: int = 3) -> GridSystem:
    """x+ = x + (u, u^2) with second coordinate capped at 9 and inputs -3..3."""
    states = [(a, b) for a in range(-3 * (N - 1), 3 * (N - 1) + 1) for b in range(0, 10)]
    inputs = [(u,) for u in range(-3, 4)]
    return GridSystem.from_function(
        states, inputs, lambda x, u: x + np.array([u[0], u[0] ** 2]),
        targets=[{(4, 8)}, {(3, 9)}], z0=(0, 0), N=N, admissible=lambda x: x[1] <= 9)


def restricted_input_certificate(sys: GridSystem | None = None) -> dict[str, bool]:
    """Memberships showing that reachable sets do not compose along admissible paths."""
    sys = sys or restricted_input_instance()
    return {
        "(3,9) in F_1(z0)": (3, 9) in forward_reach(sys, 1, sys.z0),
        "(4,8) in F_2(z0)": (4, 8) in forward_reach(sys, 2, sys.z0),
        "(4,8) not in F_1((3,9))": (4, 8) not in forward_reach(sys, 1, (3, 9)),
    }


def integrator_instance(lo: int, hi: int, z0: int, targets: list[int], N: int) -> GridSystem:
    """1-D integrator x+ = x + u, u in {-1, 0, 1}, on the box [lo, hi]."""
    return GridSystem.from_function(
        [(x,) for x in range(lo, hi + 1)], [(-1,), (0,), (1,)], lambda x, u: x + u,
        targets=[{(t,)} for t in targets], z0=(z0,), N=N,
        embedding={"kind": "integrator", "lo": lo, "hi": hi, "u_bound": 1})


def random_instance(seed: int, max_targets: int = 3, max_N: int = 5, max_inputs: int = 3,
                    tries: int = 200) -> GridSystem:
    """Random instance satisfying the joint-start assumption (every target reachable).

    Alternates between integrator-like grids and fully random transition tables.
    """
    rng = np.random.default_rng(seed)
    for _ in range(tries):
        n = int(rng.integers(1, max_targets + 1))
        N = int(rng.integers(2, max_N + 1))
        n_in = int(rng.integers(1, max_inputs + 1))
        if rng.uniform() < 0.5:
            dim = int(rng.integers(1, 3))
            half = int(rng.integers(2, 4))
            states = list(itertools.product(range(-half, half + 1), repeat=dim))
            pool = list(itertools.product((-1, 0, 1), repeat=dim))
            pick = rng.choice(len(pool), size=min(n_in, len(pool)), replace=False)
            inputs = [pool[p] for p in sorted(pick)]
            trans = {}
            for x in states:
                for u in inputs:
                    y = tuple(a + b for a, b in zip(x, u))
                    trans[(x, u)] = y
        else:
            S = int(rng.integers(3, 9))
            states = [(s,) for s in range(S)]
            inputs = [(u,) for u in range(n_in)]
            trans = {}
            for x in states:
                for u in inputs:
                    if rng.uniform() < 0.85:
                        trans[(x, u)] = (int(rng.integers(0, S)),)
        z0 = states[int(rng.integers(len(states)))]
        targets = []
        for _ in range(n):
            size = int(rng.integers(1, 3))
            idx = rng.choice(len(states), size=size, replace=False)
            targets.append({states[i] for i in idx})
        sys = GridSystem(states, inputs, trans, targets, z0, N)
        if all(k_reach(sys, j, 1) for j in range(n)):
            return sys
    raise RuntimeError(f"no instance satisfying the assumption found for seed {seed}")


def random_integrator_instance(seed: int, max_targets: int = 3, max_N: int = 5) -> GridSystem:
    """Random 1-D integrator instance with point targets (convex-embeddable)."""
    rng = np.random.default_rng(seed)
    for _ in range(200):
        n = int(rng.integers(1, max_targets + 1))
        N = int(rng.integers(2, max_N + 1))
        lo, hi = -int(rng.integers(2, 5)), int(rng.integers(2, 5))
        z0 = int(rng.integers(lo, hi + 1))
        targets = [int(rng.integers(lo, hi + 1)) for _ in range(n)]
        sys = integrator_instance(lo, hi, z0, targets, N)
        if all(k_reach(sys, j, 1) for j in range(n)):
            return sys
    raise RuntimeError(f"no feasible integrator instance for seed {seed}")


def corpus(count: int = 60, seed0: int = 0) -> list[GridSystem]:
    return [random_instance(seed0 + s) for s in range(count)]


def convex_corpus(count: int = 30, seed0: int = 1000) -> list[GridSystem]:
    return [random_integrator_instance(seed0 + s) for s in range(count)]
