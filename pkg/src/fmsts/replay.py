"""Experience replay with uniform or error-prioritised sampling.

The priority of an experience is its relative prediction error,
``|target - predicted| / target + PRIORITY_FLOOR``; prioritised sampling
draws index ``j`` with probability ``priority_j / sum(priority)``.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np

PRIORITY_FLOOR = 1e-3
DEFAULT_CAPACITY = 50_000


class ExperienceError(ValueError):
    pass


def priority(target: float, predicted: float) -> float:
    return abs(target - predicted) / target + PRIORITY_FLOOR


@dataclass
class Experience:
    instance_id: str
    static: np.ndarray  # shared per instance, never copied
    dynamic: np.ndarray
    action: int
    target: int
    predicted: float
    v_root: int
    priority: float = 0.0

    def __post_init__(self):
        if not self.priority:
            self.priority = priority(self.target, self.predicted)

    def problems(self) -> list:
        out = []
        if self.target < 3:
            out.append(f"target {self.target} < 3 (a branched node has two children)")
        if self.v_root < self.target:
            out.append(f"v_root {self.v_root} < target {self.target}")
        if not np.isfinite(self.predicted):
            out.append("non-finite prediction")
        if not self.priority > 0:
            out.append("priority must be positive")
        return out


class ReplayBuffer:
    """FIFO ring of experiences; ``counter`` counts every push ever made.

    Experience ``k`` (in push order) lives at slot ``k - evicted``; sampled
    indices are global push indices so they survive later evictions.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items = deque()
        self._prio = deque()
        self.counter = 0
        self.stale_updates = 0

    def __len__(self):
        return len(self._items)

    @property
    def first_index(self) -> int:
        return self.counter - len(self._items)

    def push(self, experiences) -> None:
        experiences = list(experiences)
        for e in experiences:
            bad = e.problems()
            if bad:
                raise ExperienceError(f"rejected experience from {e.instance_id}: " + "; ".join(bad))
        for e in experiences:
            self._items.append(e)
            self._prio.append(e.priority)
            self.counter += 1
            if len(self._items) > self.capacity:
                self._items.popleft()
                self._prio.popleft()

    def get(self, index: int) -> Experience:
        return self._items[index - self.first_index]

    def priorities(self) -> np.ndarray:
        return np.fromiter(self._prio, dtype=float, count=len(self._prio))

    def probabilities(self, mode: str = "prioritized") -> np.ndarray:
        if mode == "uniform":
            return np.full(len(self), 1.0 / len(self))
        p = self.priorities()
        return p / p.sum()

    def sample(self, batch_size: int, mode: str = "prioritized", rng=None) -> list:
        """Draw ``batch_size`` ``(index, experience)`` pairs with replacement."""
        if not self._items:
            raise ValueError("cannot sample from an empty replay buffer")
        if mode not in ("uniform", "prioritized"):
            raise ValueError(f"unknown sampling mode {mode!r}")
        rng = np.random.default_rng() if rng is None else rng
        if mode == "uniform":
            slots = rng.integers(len(self), size=batch_size)
        else:
            slots = rng.choice(len(self), size=batch_size, p=self.probabilities())
        base = self.first_index
        return [(base + int(s), self._items[int(s)]) for s in slots]

    def update_priorities(self, indices, predictions) -> None:
        base = self.first_index
        for idx, pred in zip(indices, predictions):
            slot = int(idx) - base
            if slot < 0 or slot >= len(self._items):
                self.stale_updates += 1
                continue
            e = self._items[slot]
            e.predicted = float(pred)
            e.priority = priority(e.target, e.predicted)
            self._prio[slot] = e.priority

    def dump(self, path=None) -> str:
        rows = [{"index": self.first_index + k, "instance": e.instance_id, "action": e.action,
                 "target": e.target, "predicted": e.predicted, "v_root": e.v_root,
                 "priority": e.priority} for k, e in enumerate(self._items)]
        text = json.dumps({"capacity": self.capacity, "counter": self.counter,
                           "experiences": rows}, indent=1)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text
