"""Shared helpers: small random instances and independent LP / MILP oracles."""

import itertools
import sys

import numpy as np
import pytest

from fmsts.instances import MilpInstance


def random_knapsack(rng, n=6, m=2, idx=0):
    W = rng.integers(1, 20, size=(m, n)).astype(float)
    cap = np.floor(rng.uniform(0.3, 0.7) * W.sum(axis=1))
    values = rng.integers(1, 30, size=n).astype(float)
    return MilpInstance(id=f"rk-{idx}", A=W, b=cap, c=-values, J=tuple(range(n)))


def random_mixed(rng, nb=4, nc=2, m=3, idx=0):
    """Binary and continuous variables; continuous ones sit in [0, 5] via explicit rows."""
    n = nb + nc
    A = rng.integers(-5, 10, size=(m, n)).astype(float)
    b = rng.integers(5, 25, size=m).astype(float)
    box = np.zeros((2 * nc, n))
    for k in range(nc):
        box[2 * k, nb + k] = 1.0
        box[2 * k + 1, nb + k] = -1.0
    A = np.vstack([A, box])
    b = np.concatenate([b, np.tile([5.0, 0.0], nc)])
    c = rng.integers(-10, 10, size=n).astype(float)
    return MilpInstance(id=f"mx-{idx}", A=A, b=b, c=c, J=tuple(range(nb)))


def vertex_min(c, A, b, lo, hi, tol=1e-9):
    """Minimum of c.x over {Ax <= b, lo <= x <= hi} by enumerating every basic solution.

    Returns ``None`` when the (bounded) polytope is empty.
    """
    c, A, b = np.asarray(c, float), np.asarray(A, float).reshape(-1, len(c)), np.asarray(b, float)
    n = len(c)
    G = np.vstack([A, np.eye(n), -np.eye(n)])
    h = np.concatenate([b, hi, -lo])
    combos = np.array(list(itertools.combinations(range(len(G)), n)))
    M = G[combos]
    rhs = h[combos]
    ok = np.abs(np.linalg.det(M)) > 1e-10
    M, rhs = M[ok], rhs[ok]
    if not len(M):
        return None
    X = np.linalg.solve(M, rhs[..., None])[..., 0]
    feas = np.all(X @ G.T <= h + tol * (1 + np.abs(h)), axis=1)
    if not feas.any():
        return None
    return float((X[feas] @ c).min())


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_knapsack():
    # 2x0 + 2x1 <= 3, min -x0 - x1: only one item fits
    return MilpInstance(id="tiny", A=np.array([[2.0, 2.0]]), b=np.array([3.0]),
                        c=np.array([-1.0, -1.0]), J=(0, 1))


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is not None and acc.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acc.RESULTS):
            terminalreporter.write_line(line)
