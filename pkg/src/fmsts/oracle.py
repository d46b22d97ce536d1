"""Exhaustive ground truth for tiny instances.

* :func:`min_tree_size` - smallest DFS tree over all branching choices, with
  the incumbent propagated from earlier subtrees exactly as the engine does.
* :func:`brute_force_optimum` - MILP optimum by enumerating all binary points.
* :func:`verify_prop2` - the global minimum over *all* complete branching
  policies, obtained by enumerating the set of achievable (size, incumbent)
  outcomes, compared with the composition of per-node minimal subtrees.

Pruning and integrality tolerances are imported from the engine so that the
two never disagree on a borderline node.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .bnb import PRUNE_TOL, first_child_value
from .instances import MilpInstance
from .lp import Fixings, LpStatus, is_integral, solve_relaxation

MIN_TREE_CAP = 14
BRUTE_FORCE_CAP = 20
PROP2_CAP = 6
BUCKET = 1e-9


class OracleCapExceeded(ValueError):
    pass


@dataclass
class OracleResult:
    min_tree_size: int
    optimal_first_actions: set
    milp_optimum: float | None
    nodes_explored: int


@dataclass
class BruteForceResult:
    feasible: bool
    objective: float | None
    assignment: dict | None
    evaluated: int


@dataclass
class Prop2Report:
    instance_id: str
    global_min: int
    greedy: int
    equal: bool
    policies_enumerated: int
    outcomes: list = field(default_factory=list)


def _bucket(value):
    return None if value is None else round(value / BUCKET)


def _pruned(lp, incumbent) -> bool:
    return incumbent is not None and lp.objective >= incumbent - PRUNE_TOL


class _Tree:
    """Shared node evaluation with an LP cache keyed by fixings."""

    def __init__(self, instance: MilpInstance):
        self.instance = instance
        self.lp_cache = {}
        self.lp_calls = 0

    def lp(self, fixings: Fixings):
        key = fixings.key()
        res = self.lp_cache.get(key)
        if res is None:
            res = solve_relaxation(self.instance, fixings)
            self.lp_cache[key] = res
            self.lp_calls += 1
        return res

    def leaf(self, fixings: Fixings, incumbent):
        """``(is_leaf, incumbent_after, lp)`` for the node with these fixings."""
        lp = self.lp(fixings)
        if lp.status is LpStatus.INFEASIBLE:
            return True, incumbent, lp
        if lp.status is LpStatus.UNBOUNDED:
            raise RuntimeError("unbounded relaxation in oracle")
        if _pruned(lp, incumbent):
            return True, incumbent, lp
        if is_integral(lp.x, self.instance.J):
            return True, lp.objective, lp
        return False, incumbent, lp

    def free(self, fixings: Fixings):
        return [j for j in self.instance.J if j not in fixings.fixed]

    def orders(self, lp, j, child_order):
        first = first_child_value(lp.x[j])
        if child_order == "engine_rule":
            return [(first, 1 - first)]
        return [(first, 1 - first), (1 - first, first)]


def _check_order(child_order):
    if child_order not in ("engine_rule", "minimize_over_order"):
        raise ValueError(f"unknown child_order {child_order!r}")


def min_tree_size(instance: MilpInstance, fixings: Fixings = Fixings(), incumbent=None,
                  child_order: str = "engine_rule", memo: bool = True) -> OracleResult:
    """Exact minimum DFS tree size below ``fixings`` entered with ``incumbent``."""
    _check_order(child_order)
    free_count = len(instance.J) - len(fixings.fixed & set(instance.J))
    if free_count > MIN_TREE_CAP:
        raise OracleCapExceeded(f"{free_count} free binaries exceed the cap of {MIN_TREE_CAP}")
    tree = _Tree(instance)
    table = {}
    explored = [0]

    def rec(fx: Fixings, inc):
        key = (fx.key(), _bucket(inc))
        if memo and key in table:
            return table[key]
        explored[0] += 1
        is_leaf, inc_after, lp = tree.leaf(fx, inc)
        if is_leaf:
            out = (1, inc_after, set())
        else:
            best, best_inc, best_actions = None, None, set()
            for j in tree.free(fx):
                for first, second in tree.orders(lp, j, child_order):
                    s1, inc1, _ = rec(fx.with_fix(j, first), inc)
                    s2, inc2, _ = rec(fx.with_fix(j, second), inc1)
                    size = 1 + s1 + s2
                    if best is None or size < best:
                        best, best_inc, best_actions = size, inc2, {j}
                    elif size == best:
                        best_actions.add(j)
            out = (best, best_inc, best_actions)
        if memo:
            table[key] = out
        return out

    size, inc_final, actions = rec(fixings, incumbent)
    return OracleResult(min_tree_size=size, optimal_first_actions=actions,
                        milp_optimum=inc_final, nodes_explored=explored[0])


def brute_force_optimum(instance: MilpInstance) -> BruteForceResult:
    """Best objective over all binary assignments (continuous part solved by LP)."""
    J = list(instance.J)
    if len(J) > BRUTE_FORCE_CAP:
        raise OracleCapExceeded(f"|J|={len(J)} exceeds the brute-force cap of {BRUTE_FORCE_CAP}")
    points = np.array(list(itertools.product((0.0, 1.0), repeat=len(J))))
    best_obj, best_assign = None, None
    if len(J) == instance.n:
        # pure binary: feasibility and objective are direct matrix products
        X = np.zeros((points.shape[0], instance.n))
        X[:, J] = points
        ok = np.all(X @ instance.A.T <= instance.b + 1e-7, axis=1) if instance.m else \
            np.ones(points.shape[0], dtype=bool)
        if ok.any():
            obj = X @ instance.c
            obj[~ok] = np.inf
            k = int(np.argmin(obj))
            best_obj, best_assign = float(obj[k]), points[k]
    else:
        for pt in points:
            fx = Fixings(frozenset(j for j, v in zip(J, pt) if v == 0),
                         frozenset(j for j, v in zip(J, pt) if v == 1))
            res = solve_relaxation(instance, fx)
            if res.status is LpStatus.OPTIMAL and (best_obj is None or res.objective < best_obj):
                best_obj, best_assign = res.objective, pt
    if best_obj is None:
        return BruteForceResult(False, None, None, points.shape[0])
    return BruteForceResult(True, best_obj, {j: int(v) for j, v in zip(J, best_assign)},
                            points.shape[0])


def outcome_set(instance: MilpInstance, fixings: Fixings = Fixings(), incumbent=None,
                child_order: str = "engine_rule"):
    """All achievable ``(tree size, incumbent after)`` pairs and the number of policies.

    Enumerates every complete branching policy below ``fixings``: at each
    branched node every free binary, and for each the full outcome sets of
    both children, where the second child is entered with the incumbent that
    the first child's policy actually produced. Nothing assumes subtree
    independence. Results are memoised on (fixings, incumbent) only, which is
    exact because a subtree's outcome set is a function of those two.
    """
    _check_order(child_order)
    tree = _Tree(instance)
    table = {}

    def rec(fx: Fixings, inc):
        # returns {(size, incumbent bucket): [incumbent, number of policies]}
        key = (fx.key(), _bucket(inc))
        if key in table:
            return table[key]
        is_leaf, inc_after, lp = tree.leaf(fx, inc)
        if is_leaf:
            out = {(1, _bucket(inc_after)): [inc_after, 1]}
        else:
            out = {}
            for j in tree.free(fx):
                for first, second in tree.orders(lp, j, child_order):
                    for (s1, _), (inc1, n1) in rec(fx.with_fix(j, first), inc).items():
                        for (s2, b2), (inc2, n2) in rec(fx.with_fix(j, second), inc1).items():
                            slot = out.setdefault((1 + s1 + s2, b2), [inc2, 0])
                            slot[1] += n1 * n2
        table[key] = out
        return out

    outcomes = rec(fixings, incumbent)
    return outcomes, sum(n for _, n in outcomes.values())


def verify_prop2(instance: MilpInstance, child_order: str = "engine_rule") -> Prop2Report:
    """Global minimum over all DFS branching policies vs. per-node minimal subtrees."""
    if len(instance.J) > PROP2_CAP:
        raise OracleCapExceeded(f"|J|={len(instance.J)} exceeds the cap of {PROP2_CAP}")
    outcomes, count = outcome_set(instance, child_order=child_order)
    global_min = min(s for s, _ in outcomes)
    greedy = greedy_tree_size(instance, child_order=child_order)
    return Prop2Report(instance.id, global_min, greedy, global_min == greedy, count,
                       sorted({s for s, _ in outcomes}))


def greedy_tree_size(instance: MilpInstance, fixings: Fixings = Fixings(), incumbent=None,
                     child_order: str = "engine_rule") -> int:
    """Tree size when every node takes an action whose own subtree is minimal.

    The engine-like DFS is replayed explicitly: at each branched node the action
    is chosen by the local minimal-subtree oracle for the node's current
    incumbent, then the children are expanded in order.
    """
    tree = _Tree(instance)
    local = {}

    def best_action(fx, inc):
        key = (fx.key(), _bucket(inc))
        if key not in local:
            res = min_tree_size(instance, fx, inc, child_order)
            local[key] = min(res.optimal_first_actions)
        return local[key]

    def rec(fx, inc):
        is_leaf, inc_after, lp = tree.leaf(fx, inc)
        if is_leaf:
            return 1, inc_after
        j = best_action(fx, inc)
        best = None
        for first, second in tree.orders(lp, j, child_order):
            s1, inc1 = rec(fx.with_fix(j, first), inc)
            s2, inc2 = rec(fx.with_fix(j, second), inc1)
            if best is None or 1 + s1 + s2 < best[0]:
                best = (1 + s1 + s2, inc2)
        return best

    return rec(fixings, incumbent)[0]


class OraclePolicy:
    """Branching policy that takes a minimal-subtree action at every node (tiny |J| only)."""

    name = "oracle"

    def choose(self, node, instance: MilpInstance) -> int:
        res = min_tree_size(instance, node.fixings, node.incumbent_at_entry)
        return min(res.optimal_first_actions)
