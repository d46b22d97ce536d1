"""Depth-first Branch-and-Bound over binary variables with pluggable branching.

Every node that is created gets its LP solved when popped from the stack, so
the tree size is simply the number of created nodes. Subtree sizes satisfy
``V(s) = 1 + V(child0) + V(child1)`` at branched nodes and ``V = 1`` at leaves.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .instances import MilpInstance
from .lp import Fixings, LpResult, LpStatus, INT_TOL, is_integral, solve_relaxation

PRUNE_TOL = 1e-9
DEFAULT_NODE_LIMIT = 50_000


class Outcome(str, enum.Enum):
    BRANCHED = "branched"
    PRUNED_BOUND = "pruned_bound"
    PRUNED_INFEASIBLE = "pruned_infeasible"
    INTEGRAL_LEAF = "integral_leaf"
    OPEN = "open"  # only in truncated records


class StructureError(ValueError):
    pass


class PolicyError(ValueError):
    pass


class UnboundedRelaxationError(RuntimeError):
    pass


class NodeLimitExceeded(RuntimeError):
    def __init__(self, record: "TreeRecord", limit: int):
        super().__init__(f"node limit {limit} exceeded")
        self.record = record
        self.limit = limit


@dataclass
class NodeState:
    node_id: int
    depth: int
    fixings: Fixings
    parent_id: int | None = None
    lp: LpResult | None = None
    incumbent_at_entry: float | None = None
    outcome: Outcome = Outcome.OPEN
    action: int | None = None
    child0_id: int | None = None
    child1_id: int | None = None

    @property
    def children(self) -> tuple:
        if self.outcome is Outcome.BRANCHED:
            return (self.child0_id, self.child1_id)
        return ()

    def unfixed(self, instance: MilpInstance) -> list:
        fixed = self.fixings.fixed
        return [j for j in instance.J if j not in fixed]


@dataclass(frozen=True)
class Decision:
    node_id: int
    action: int
    was_random: bool


@dataclass
class TreeRecord:
    instance_id: str
    nodes: list
    V: np.ndarray
    incumbent: float | None
    best_x: np.ndarray | None
    decisions: list
    expansion_order: list
    truncated: bool = False

    @property
    def total_nodes(self) -> int:
        return len(self.nodes)

    def to_dict(self) -> dict:
        nodes = []
        for nd in self.nodes:
            nodes.append({
                "id": nd.node_id,
                "parent": nd.parent_id,
                "depth": nd.depth,
                "fixed_zero": sorted(nd.fixings.zero),
                "fixed_one": sorted(nd.fixings.one),
                "outcome": nd.outcome.value,
                "action": nd.action,
                "children": list(nd.children),
                "lp_status": nd.lp.status.value if nd.lp is not None else None,
                "lp_objective": None if nd.lp is None or nd.lp.objective is None
                else repr(nd.lp.objective),
            })
        return {
            "instance": self.instance_id,
            "total_nodes": self.total_nodes,
            "incumbent": None if self.incumbent is None else repr(self.incumbent),
            "best_x": None if self.best_x is None else [repr(float(v)) for v in self.best_x],
            "V": [int(v) for v in self.V],
            "decisions": [{"node": d.node_id, "action": d.action, "random": d.was_random}
                          for d in self.decisions],
            "expansion_order": list(self.expansion_order),
            "truncated": self.truncated,
            "nodes": nodes,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


class BranchingPolicy(Protocol):
    def choose(self, node: NodeState, instance: MilpInstance) -> int:
        ...


def first_child_value(lp_value: float) -> int:
    """DFS visits the child that agrees with rounding the LP value first (0.5 goes up)."""
    return 1 if lp_value >= 0.5 else 0


def solve(instance: MilpInstance, policy: BranchingPolicy, seed: int = 0,
          epsilon: float = 0.0, node_limit: int = DEFAULT_NODE_LIMIT) -> TreeRecord:
    """Solve ``instance`` to optimality (gap zero) under DFS, branching via ``policy``.

    With probability ``epsilon`` per branched node the action is replaced by a
    uniformly random unfixed binary; such decisions are flagged ``was_random``.
    Raises :class:`NodeLimitExceeded` carrying the partial record when more than
    ``node_limit`` nodes would be created.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    nodes = [NodeState(0, 0, Fixings())]
    stack = [0]
    incumbent = None
    best_x = None
    decisions = []
    order = []
    J = instance.J

    def record(truncated=False):
        return TreeRecord(instance.id, nodes, compute_subtree_sizes(nodes), incumbent,
                          best_x, decisions, order, truncated)

    while stack:
        nid = stack.pop()
        node = nodes[nid]
        order.append(nid)
        node.incumbent_at_entry = incumbent
        lp = solve_relaxation(instance, node.fixings)
        node.lp = lp
        if lp.status is LpStatus.UNBOUNDED:
            raise UnboundedRelaxationError(
                f"{instance.id}: unbounded relaxation at node {nid}; continuous variables must be boxed")
        if lp.status is LpStatus.INFEASIBLE:
            node.outcome = Outcome.PRUNED_INFEASIBLE
            continue
        if incumbent is not None and lp.objective >= incumbent - PRUNE_TOL:
            node.outcome = Outcome.PRUNED_BOUND
            continue
        if is_integral(lp.x, J):
            node.outcome = Outcome.INTEGRAL_LEAF
            incumbent = lp.objective
            best_x = lp.x.copy()
            continue

        was_random = epsilon > 0.0 and rng.random() < epsilon
        if was_random:
            free = node.unfixed(instance)
            action = int(free[rng.integers(len(free))])
        else:
            action = int(policy.choose(node, instance))
            if action not in J or action in node.fixings.fixed:
                raise PolicyError(f"policy chose {action}, not an unfixed binary at node {nid}")
        if len(nodes) + 2 > node_limit:
            raise NodeLimitExceeded(record(truncated=True), node_limit)

        node.outcome = Outcome.BRANCHED
        node.action = action
        decisions.append(Decision(nid, action, was_random))
        c0 = NodeState(len(nodes), node.depth + 1, node.fixings.with_fix(action, 0), nid)
        c1 = NodeState(len(nodes) + 1, node.depth + 1, node.fixings.with_fix(action, 1), nid)
        nodes += [c0, c1]
        node.child0_id, node.child1_id = c0.node_id, c1.node_id
        if first_child_value(lp.x[action]) == 1:
            stack += [c0.node_id, c1.node_id]
        else:
            stack += [c1.node_id, c0.node_id]

    return record()


def compute_subtree_sizes(record: TreeRecord) -> np.ndarray:
    """Subtree size of every node (node inclusive), by explicit post-order.

    Accepts a :class:`TreeRecord` or a bare list of nodes.
    """
    nodes = record.nodes if isinstance(record, TreeRecord) else record
    index = {nd.node_id: k for k, nd in enumerate(nodes)}
    V = np.zeros(len(nodes), dtype=np.int64)
    done = np.zeros(len(nodes), dtype=bool)
    for root in range(len(nodes)):
        if done[root]:
            continue
        stack = [(root, False)]
        while stack:
            k, expanded = stack.pop()
            if done[k]:
                continue
            kids = nodes[k].children
            for cid in kids:
                if cid not in index:
                    raise StructureError(f"node {nodes[k].node_id} references missing child {cid}")
            if expanded or not kids:
                V[k] = 1 + sum(int(V[index[c]]) for c in kids)
                done[k] = True
            else:
                stack.append((k, True))
                stack.extend((index[c], False) for c in kids)
    return V


# -- baseline policies ------------------------------------------------------------

def _fractionality(node: NodeState, cands) -> np.ndarray:
    x = node.lp.x[cands]
    return np.minimum(x, 1.0 - x)


class MostFractionalPolicy:
    """Branch on the unfixed binary whose LP value is closest to 0.5."""

    name = "mostfrac"

    def choose(self, node: NodeState, instance: MilpInstance) -> int:
        cands = node.unfixed(instance)
        if not cands:
            raise PolicyError("no unfixed binary left")
        frac = _fractionality(node, cands)
        if frac.max() <= INT_TOL:
            return int(cands[0])
        # differences below 1e-12 are rounding noise, keep the lowest index
        return int(cands[int(np.flatnonzero(frac >= frac.max() - 1e-12)[0])])


class StrongBranchingPolicy:
    """Full strong branching with the product score of both child bound gains."""

    name = "sb"
    INFEASIBLE_GAIN = 1e6
    MIN_GAIN = 1e-6

    def scores(self, node: NodeState, instance: MilpInstance) -> dict:
        parent = node.lp.objective
        out = {}
        for j in node.unfixed(instance):
            gains = []
            for v in (0, 1):
                child = solve_relaxation(instance, node.fixings.with_fix(j, v))
                if child.status is LpStatus.OPTIMAL:
                    gains.append(max(child.objective - parent, self.MIN_GAIN))
                else:
                    gains.append(self.INFEASIBLE_GAIN)
            out[j] = gains[0] * gains[1]
        return out

    def choose(self, node: NodeState, instance: MilpInstance) -> int:
        scores = self.scores(node, instance)
        if not scores:
            raise PolicyError("no unfixed binary left")
        best = max(scores.values())
        return min(j for j, s in scores.items() if s >= best * (1 - 1e-12))


class RandomPolicy:
    """Uniform choice among unfixed binaries, reproducible from ``seed``."""

    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def choose(self, node: NodeState, instance: MilpInstance) -> int:
        cands = node.unfixed(instance)
        if not cands:
            raise PolicyError("no unfixed binary left")
        return int(cands[self.rng.integers(len(cands))])

    def spawn(self, index: int) -> "RandomPolicy":
        """Fresh policy for the ``index``-th instance, independent of evaluation order."""
        return RandomPolicy(np.random.default_rng([int(self.seed), int(index)]).integers(2**63))


def most_fractional_policy() -> MostFractionalPolicy:
    return MostFractionalPolicy()


def strong_branching_policy() -> StrongBranchingPolicy:
    return StrongBranchingPolicy()


def random_policy(seed: int = 0) -> RandomPolicy:
    return RandomPolicy(seed)


BASELINES = {
    "random": random_policy,
    "mostfrac": most_fractional_policy,
    "sb": strong_branching_policy,
}
