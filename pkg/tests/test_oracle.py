import numpy as np
import pytest

from conftest import random_knapsack, random_mixed
from fmsts import oracle
from fmsts.bnb import MostFractionalPolicy, RandomPolicy, StrongBranchingPolicy, first_child_value, solve
from fmsts.instances import MilpInstance
from fmsts.lp import Fixings, LpStatus, is_integral, solve_relaxation
from fmsts.oracle import (OracleCapExceeded, OraclePolicy, brute_force_optimum, greedy_tree_size,
                          min_tree_size, verify_prop2)


def _k3():
    return MilpInstance(id="k3", A=np.array([[2.0, 2.0, 2.0]]), b=np.array([3.0]), c=-np.ones(3), J=(0, 1, 2))


def naive_min(instance, fx=Fixings(), inc=None):
    """Memo-free exhaustive DFS minimum with the engine's child order; returns (size, incumbent)."""
    lp = solve_relaxation(instance, fx)
    if lp.status is LpStatus.INFEASIBLE:
        return 1, inc
    if inc is not None and lp.objective >= inc - 1e-9:
        return 1, inc
    if is_integral(lp.x, instance.J):
        return 1, lp.objective
    best = None
    for j in instance.J:
        if j in fx.fixed:
            continue
        first = first_child_value(lp.x[j])
        s1, i1 = naive_min(instance, fx.with_fix(j, first), inc)
        s2, i2 = naive_min(instance, fx.with_fix(j, 1 - first), i1)
        if best is None or 1 + s1 + s2 < best[0]:
            best = (1 + s1 + s2, i2)
    return best


def test_root_integral():
    p = MilpInstance(id="i", A=np.ones((1, 2)), b=np.array([5.0]), c=-np.ones(2), J=(0, 1))
    res = min_tree_size(p)
    assert res.min_tree_size == 1 and res.milp_optimum == -2.0
    rep = verify_prop2(p)
    assert rep.global_min == rep.greedy == 1 and rep.equal


def test_three_item_against_naive_recursion():
    p = _k3()
    res = min_tree_size(p)
    assert res.milp_optimum == -1.0
    assert res.min_tree_size == naive_min(p)[0]
    assert min_tree_size(p, memo=False).min_tree_size == res.min_tree_size


def test_memo_matches_naive_on_random_instances():
    rng = np.random.default_rng(5)
    for k in range(25):
        p = random_knapsack(rng, n=5, m=2, idx=k) if k % 3 else random_mixed(rng, nb=4, idx=k)
        size, inc = naive_min(p)
        res = min_tree_size(p)
        assert res.min_tree_size == size
        assert (res.milp_optimum is None) == (inc is None)


def test_order_freedom_never_hurts():
    rng = np.random.default_rng(6)
    for k in range(20):
        p = random_knapsack(rng, n=5, m=2, idx=k)
        a = min_tree_size(p, child_order="engine_rule").min_tree_size
        b = min_tree_size(p, child_order="minimize_over_order").min_tree_size
        assert b <= a


def test_engine_never_beats_oracle():
    rng = np.random.default_rng(8)
    for k in range(15):
        p = random_knapsack(rng, n=6, m=2, idx=k)
        best = min_tree_size(p).min_tree_size
        for pol in (MostFractionalPolicy(), StrongBranchingPolicy(), RandomPolicy(k)):
            assert solve(p, pol).total_nodes >= best
        assert solve(p, OraclePolicy()).total_nodes == best


def test_brute_force_examples(tiny_knapsack):
    res = brute_force_optimum(tiny_knapsack)
    assert res.feasible and res.objective == -1.0 and sum(res.assignment.values()) == 1
    infeasible = MilpInstance(id="x", A=np.array([[1.0, 1.0], [-1.0, -1.0]]), b=np.array([1.0, -3.0]),
                              c=np.zeros(2), J=(0, 1))
    res = brute_force_optimum(infeasible)
    assert not res.feasible and res.objective is None and res.evaluated == 4


def test_brute_force_agrees_with_engine():
    rng = np.random.default_rng(9)
    for k in range(100):
        p = random_knapsack(rng, n=int(rng.integers(3, 9)), m=2, idx=k) if k % 4 else random_mixed(rng, idx=k)
        bf = brute_force_optimum(p)
        rec = solve(p, MostFractionalPolicy())
        if bf.feasible:
            assert rec.incumbent == pytest.approx(bf.objective, abs=1e-6)
        else:
            assert rec.incumbent is None


def test_caps():
    big = random_knapsack(np.random.default_rng(0), n=15, m=1)
    with pytest.raises(OracleCapExceeded):
        min_tree_size(big)
    with pytest.raises(OracleCapExceeded):
        verify_prop2(random_knapsack(np.random.default_rng(0), n=7, m=1))
    with pytest.raises(OracleCapExceeded):
        brute_force_optimum(random_knapsack(np.random.default_rng(0), n=21, m=1))
    with pytest.raises(ValueError):
        min_tree_size(_k3(), child_order="sideways")


def test_prop2_on_random_instances():
    rng = np.random.default_rng(10)
    for k in range(10):
        p = random_knapsack(rng, n=int(rng.integers(2, 6)), m=2, idx=k)
        for order in ("engine_rule", "minimize_over_order"):
            rep = verify_prop2(p, order)
            assert rep.equal and rep.global_min == min(rep.outcomes)
            assert rep.policies_enumerated >= 1


def test_prop2_subproblem_consistency():
    # the minimum decomposes: root size = 1 + best child sizes for some optimal first action
    rng = np.random.default_rng(11)
    for k in range(10):
        p = random_knapsack(rng, n=5, m=2, idx=k)
        res = min_tree_size(p)
        if res.min_tree_size == 1:
            continue
        lp = solve_relaxation(p)
        for j in res.optimal_first_actions:
            first = first_child_value(lp.x[j])
            c1 = min_tree_size(p, Fixings().with_fix(j, first), None)
            c2 = min_tree_size(p, Fixings().with_fix(j, 1 - first), c1.milp_optimum)
            assert 1 + c1.min_tree_size + c2.min_tree_size == res.min_tree_size
        assert greedy_tree_size(p) == res.min_tree_size


def test_policy_count_is_exact_on_a_tiny_case():
    # every (size, incumbent) pair of every complete policy, listed without memoisation
    p = _k3()

    def all_policies(fx, inc):
        lp = solve_relaxation(p, fx)
        if lp.status is LpStatus.INFEASIBLE or (inc is not None and lp.objective >= inc - 1e-9):
            return [(1, inc)]
        if is_integral(lp.x, p.J):
            return [(1, lp.objective)]
        out = []
        for j in p.J:
            if j in fx.fixed:
                continue
            first = first_child_value(lp.x[j])
            for s1, i1 in all_policies(fx.with_fix(j, first), inc):
                for s2, i2 in all_policies(fx.with_fix(j, 1 - first), i1):
                    out.append((1 + s1 + s2, i2))
        return out

    outcomes, count = oracle.outcome_set(p)
    hand = all_policies(Fixings(), None)
    assert count == len(hand)
    assert sorted({s for s, _ in outcomes}) == sorted({s for s, _ in hand})
    for (size, _), (_, n) in outcomes.items():
        assert n == sum(1 for s, _ in hand if s == size)
