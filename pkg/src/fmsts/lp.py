"""LP relaxations via a bounded-variable two-phase primal simplex.

The relaxation of a node is ``min c.x  s.t.  Ax <= b,  l <= x <= u`` where
binaries get ``[0, 1]`` (or a fixed value), continuous variables the box
``[-CONTINUOUS_BOX, CONTINUOUS_BOX]``. Slacks turn rows into equalities;
rows whose slack would start negative receive an artificial variable that
phase 1 drives to zero. In phase 2 artificials are fixed to ``[0, 0]``.

Pricing is Dantzig (largest reduced cost) and switches to Bland's rule for
the rest of the solve after ``DEGENERATE_LIMIT`` consecutive degenerate pivots.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .instances import CONTINUOUS_BOX, MilpInstance

FEAS_TOL = 1e-7
OPT_TOL = 1e-7
INT_TOL = 1e-6
PIVOT_TOL = 1e-9
DEGENERATE_LIMIT = 50


class LpStatus(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


class FixingsError(ValueError):
    pass


@dataclass(frozen=True)
class Fixings:
    zero: frozenset = frozenset()
    one: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "zero", frozenset(int(j) for j in self.zero))
        object.__setattr__(self, "one", frozenset(int(j) for j in self.one))
        if self.zero & self.one:
            raise FixingsError(f"variables fixed both ways: {sorted(self.zero & self.one)}")

    @property
    def fixed(self) -> frozenset:
        return self.zero | self.one

    def __len__(self):
        return len(self.zero) + len(self.one)

    def with_fix(self, j: int, value: int) -> "Fixings":
        if value:
            return Fixings(self.zero, self.one | {j})
        return Fixings(self.zero | {j}, self.one)

    def check(self, instance: MilpInstance):
        stray = self.fixed - set(instance.J)
        if stray:
            raise FixingsError(f"fixings outside J: {sorted(stray)}")

    def key(self) -> tuple:
        return (tuple(sorted(self.zero)), tuple(sorted(self.one)))


@dataclass
class LpResult:
    status: LpStatus
    x: np.ndarray | None = None
    objective: float | None = None
    iterations: int = 0
    pivots: list = field(default_factory=list, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


def node_bounds(instance: MilpInstance, fixings: Fixings):
    lo = np.full(instance.n, -CONTINUOUS_BOX)
    hi = np.full(instance.n, CONTINUOUS_BOX)
    J = list(instance.J)
    lo[J] = 0.0
    hi[J] = 1.0
    for j in fixings.zero:
        hi[j] = 0.0
    for j in fixings.one:
        lo[j] = 1.0
    return lo, hi


def solve_relaxation(instance: MilpInstance, fixings: Fixings = Fixings(),
                     record_pivots: bool = False) -> LpResult:
    fixings.check(instance)
    lo, hi = node_bounds(instance, fixings)
    return solve_bounded(instance.c, instance.A, instance.b, lo, hi, record_pivots=record_pivots)


def solve_bounded(c, A, b, lo, hi, record_pivots: bool = False, max_iter: int | None = None) -> LpResult:
    """Minimise ``c.x`` over ``{Ax <= b, lo <= x <= hi}`` (``lo``/``hi`` finite)."""
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    if np.any(lo > hi):
        return LpResult(LpStatus.INFEASIBLE)
    return _Simplex(c, A, b, np.asarray(lo, float), np.asarray(hi, float),
                    record_pivots, max_iter).run()


class _Simplex:
    def __init__(self, c, A, b, lo, hi, record, max_iter):
        m, n = A.shape
        self.m, self.n = m, n
        # starting point of structurals: the bound nearest to zero (0 itself if inside)
        x0 = np.clip(0.0, lo, hi)
        resid = b - A @ x0
        art_rows = np.flatnonzero(resid < 0)
        k = art_rows.size
        N = n + m + k
        self.N = N
        cols = np.zeros((m, N))
        cols[:, :n] = A
        cols[:, n:n + m] = np.eye(m)
        cols[art_rows, n + m + np.arange(k)] = -1.0
        self.cols = cols
        self.b = b
        self.lo = np.concatenate([lo, np.zeros(m), np.zeros(k)])
        self.hi = np.concatenate([hi, np.full(m, np.inf), np.full(k, np.inf)])
        self.cost2 = np.concatenate([c, np.zeros(m + k)])
        self.cost1 = np.concatenate([np.zeros(n + m), np.ones(k)])
        self.art = np.arange(n + m, N)

        x = np.zeros(N)
        x[:n] = x0
        head = np.arange(n, n + m)
        head[art_rows] = n + m + np.arange(k)
        sign = np.ones(m)
        sign[art_rows] = -1.0
        x[head] = np.abs(resid)
        self.T = sign[:, None] * cols  # B^{-1} [cols] with B = diag(sign)
        self.x = x
        self.head = head
        self.basic = np.zeros(N, dtype=bool)
        self.basic[head] = True
        self.iterations = 0
        self.max_iter = max_iter or 50 * (N + m) + 1000
        self.record = record
        self.pivots = []
        self.bland = False
        self.degenerate_run = 0

    # -- one pricing + ratio test + update step; returns False at optimality
    def _step(self, cost, push_superbasic: bool):
        T, x, lo, hi = self.T, self.x, self.lo, self.hi
        d = cost - cost[self.head] @ T
        d[self.basic] = 0.0
        can_up = x < hi - FEAS_TOL
        can_down = x > lo + FEAS_TOL
        up = (d < -OPT_TOL) & can_up & ~self.basic
        down = (d > OPT_TOL) & can_down & ~self.basic
        elig = up | down
        if elig.any():
            if self.bland:
                q = int(np.flatnonzero(elig)[0])
            else:
                q = int(np.argmax(np.where(elig, np.abs(d), -1.0)))
            delta = 1.0 if up[q] else -1.0
        elif push_superbasic:
            inner = can_up & can_down & ~self.basic
            if not inner.any():
                return False
            q = int(np.flatnonzero(inner)[0])
            delta = 1.0 if d[q] <= 0 else -1.0
        else:
            return False

        col = T[:, q]
        # basic i moves by -delta*col[i]*t
        rate = -delta * col
        # distance to the entering variable's own bound (superbasics start inside their box)
        t_best = hi[q] - x[q] if delta > 0 else x[q] - lo[q]
        leave = -1
        with np.errstate(divide="ignore", invalid="ignore"):
            dec = rate < -PIVOT_TOL
            inc = rate > PIVOT_TOL
            hb = self.head
            lim = np.full(self.m, np.inf)
            lim[dec] = (x[hb[dec]] - lo[hb[dec]]) / -rate[dec]
            lim[inc] = (hi[hb[inc]] - x[hb[inc]]) / rate[inc]
        lim = np.maximum(lim, 0.0)
        if self.m:
            tmin = lim.min()
            if tmin < t_best:
                ties = np.flatnonzero(lim <= tmin + 1e-12)
                if self.bland:
                    leave = int(ties[np.argmin(hb[ties])])
                else:
                    leave = int(ties[np.argmax(np.abs(col[ties]))])
                t_best = lim[leave]
        if not np.isfinite(t_best):
            raise _Unbounded()

        self.iterations += 1
        if self.record:
            self.pivots.append((q, leave))
        if t_best <= 1e-12:
            self.degenerate_run += 1
            if self.degenerate_run >= DEGENERATE_LIMIT:
                self.bland = True
        else:
            self.degenerate_run = 0

        x[q] += delta * t_best
        x[self.head] += rate * t_best
        if leave < 0:
            # bound flip, basis unchanged
            x[q] = hi[q] if delta > 0 else lo[q]
            return True
        out = self.head[leave]
        x[out] = lo[out] if rate[leave] < 0 else hi[out]
        piv = T[leave, q]
        T[leave] /= piv
        others = np.arange(self.m) != leave
        T[others] -= np.outer(T[others, q], T[leave])
        self.head[leave] = q
        self.basic[out] = False
        self.basic[q] = True
        return True

    def _loop(self, cost, push_superbasic=False):
        while self._step(cost, push_superbasic):
            if self.iterations > self.max_iter:
                raise RuntimeError("simplex iteration limit exceeded")

    def _refresh_basics(self):
        if not self.m:
            return
        nonbasic = ~self.basic
        rhs = self.b - self.cols[:, nonbasic] @ self.x[nonbasic]
        B = self.cols[:, self.head]
        try:
            self.x[self.head] = np.linalg.solve(B, rhs)
        except np.linalg.LinAlgError:
            pass

    def run(self) -> LpResult:
        try:
            if self.art.size:
                self._loop(self.cost1)
                self._refresh_basics()
                if self.x[self.art].sum() > FEAS_TOL:
                    return LpResult(LpStatus.INFEASIBLE, iterations=self.iterations,
                                    pivots=self.pivots)
                self.hi[self.art] = 0.0
                self.x[self.art] = np.clip(self.x[self.art], 0.0, 0.0)
            self._loop(self.cost2, push_superbasic=True)
        except _Unbounded:
            return LpResult(LpStatus.UNBOUNDED, iterations=self.iterations, pivots=self.pivots)
        self._refresh_basics()
        xs = self.x[:self.n].copy()
        # snap to bounds that the iterate sits on up to rounding
        lo, hi = self.lo[:self.n], self.hi[:self.n]
        xs = np.where(np.abs(xs - lo) <= 1e-11, lo, xs)
        xs = np.where(np.abs(xs - hi) <= 1e-11, hi, xs)
        obj = float(self.cost2[:self.n] @ xs)
        return LpResult(LpStatus.OPTIMAL, x=xs, objective=obj,
                        iterations=self.iterations, pivots=self.pivots)


class _Unbounded(Exception):
    pass


def is_integral(x: np.ndarray, J, tol: float = INT_TOL) -> bool:
    xj = x[list(J)]
    return bool(np.all(np.abs(xj - np.round(xj)) <= tol))
