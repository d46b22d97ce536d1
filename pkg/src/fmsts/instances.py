"""Binary MILP instances ``min c.x  s.t.  Ax <= b, x_J in {0,1}`` and synthetic families.

Two families share a fixed structure across instances (sparsity of ``A``,
``m``, ``n`` and the binary index set ``J``) while the coefficients fluctuate:

* ``multi_knapsack``: binary-only multi-dimensional knapsack.
* ``lot_sizing``: uncapacitated-by-default lot sizing with continuous
  production / inventory / lost-sales variables and binary setups.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

# Continuous variables live in this box so every relaxation stays bounded.
CONTINUOUS_BOX = 1e6
MAX_RESAMPLE = 100
FAMILY_KINDS = ("multi_knapsack", "lot_sizing")


class InstanceValidationError(ValueError):
    pass


class ArchiveFormatError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class MilpInstance:
    id: str
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    J: tuple

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float).ravel()
        c = np.asarray(self.c, dtype=float).ravel()
        A = np.asarray(self.A, dtype=float)
        if A.ndim != 2:
            A = A.reshape(b.shape[0], c.shape[0])
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "J", tuple(int(j) for j in self.J))
        for arr in (A, b, c):
            arr.flags.writeable = False

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.c.shape[0]

    @property
    def continuous(self) -> tuple:
        jset = set(self.J)
        return tuple(i for i in range(self.n) if i not in jset)

    def flatten(self) -> np.ndarray:
        """Concatenation of (A row-major, b, c): the raw static representation."""
        return np.concatenate([self.A.ravel(), self.b, self.c])

    def sparsity(self) -> np.ndarray:
        return self.A != 0

    def __eq__(self, other):
        if not isinstance(other, MilpInstance):
            return NotImplemented
        return (self.id == other.id and self.J == other.J
                and self.A.shape == other.A.shape
                and np.array_equal(self.A, other.A)
                and np.array_equal(self.b, other.b)
                and np.array_equal(self.c, other.c))

    def __hash__(self):
        return hash((self.id, self.J, self.A.shape))


@dataclass
class FamilyConfig:
    """Generation parameters for one synthetic family.

    ``distributions`` maps coefficient names to ``(mean, spread)`` pairs of a
    normal truncated to ``mean +/- 2 spread`` (and to positive values where the
    coefficient must be positive). Missing keys fall back to family defaults.

    With ``jitter`` unset every entry is drawn independently per instance. With
    ``jitter = s`` a base value per entry is drawn once per family from those
    distributions and each instance scales it by ``1 + s z``, ``z`` a standard
    normal truncated to [-2, 2], so entries keep their identity across the family.
    """

    family_kind: str = "multi_knapsack"
    items: int = 20
    periods: int = 6
    resources: int = 2
    distributions: dict = field(default_factory=dict)
    density: float = 1.0
    seed: int = 0
    jitter: float | None = None

    def resolved_distributions(self) -> dict:
        base = dict(_DEFAULT_DISTRIBUTIONS[self.family_kind])
        base.update({k: tuple(v) for k, v in self.distributions.items()})
        return base

    def to_dict(self) -> dict:
        d = asdict(self)
        d["distributions"] = {k: list(v) for k, v in self.distributions.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FamilyConfig":
        d = dict(d)
        d["distributions"] = {k: tuple(v) for k, v in d.get("distributions", {}).items()}
        return cls(**d)

    def check(self):
        if self.family_kind not in FAMILY_KINDS:
            raise ValueError(f"unknown family_kind {self.family_kind!r}")
        if self.family_kind == "multi_knapsack":
            if self.items < 1:
                raise ValueError("multi_knapsack needs items >= 1 (|J| would be 0)")
            if self.resources < 1:
                raise ValueError("multi_knapsack needs resources >= 1")
        else:
            if self.periods < 1:
                raise ValueError("lot_sizing needs periods >= 1 (|J| would be 0)")
        if not 0.0 < self.density <= 1.0:
            raise ValueError("density must lie in (0, 1]")
        if self.jitter is not None and not 0.0 <= self.jitter < 0.5:
            raise ValueError("jitter must lie in [0, 0.5)")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        unknown = set(self.distributions) - set(_DEFAULT_DISTRIBUTIONS[self.family_kind])
        if unknown:
            raise ValueError(f"unknown coefficient distributions: {sorted(unknown)}")
        for key, (mean, spread) in self.resolved_distributions().items():
            if not (math.isfinite(mean) and math.isfinite(spread)) or spread < 0:
                raise ValueError(f"bad distribution for {key}: ({mean}, {spread})")


_DEFAULT_DISTRIBUTIONS = {
    "multi_knapsack": {
        "weight": (50.0, 20.0),
        "value": (50.0, 20.0),
        # capacity as a fraction of the row's total weight
        "tightness": (0.5, 0.05),
    },
    "lot_sizing": {
        "demand": (20.0, 8.0),
        "setup_cost": (60.0, 20.0),
        "unit_cost": (2.0, 0.5),
        "holding_cost": (1.0, 0.3),
        "lost_sale_cost": (15.0, 3.0),
        # capacity as a multiple of mean demand
        "capacity": (3.0, 0.5),
    },
}


def _truncnorm(rng: np.random.Generator, mean: float, spread: float, size,
               positive: bool = True) -> np.ndarray:
    lo, hi = mean - 2 * spread, mean + 2 * spread
    if positive:
        lo = max(lo, 1e-3 * max(abs(mean), 1.0))
    if spread == 0 or hi <= lo:
        return np.full(size, float(min(max(mean, lo), max(hi, lo))))
    out = rng.normal(mean, spread, size)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = rng.normal(mean, spread, int(bad.sum()))
        bad = (out < lo) | (out > hi)
    return out


class _Coefficients:
    """Source of coefficient draws, iid or jittered around per-family bases."""

    def __init__(self, cfg: FamilyConfig, rng: np.random.Generator):
        self.dist = cfg.resolved_distributions()
        self.jitter = cfg.jitter
        self.rng = rng
        self._base_rng = np.random.default_rng(rng.integers(2**63)) if cfg.jitter is not None else None
        self._bases = {}

    def draw(self, name: str, size) -> np.ndarray:
        if self.jitter is None:
            return _truncnorm(self.rng, *self.dist[name], size)
        base = self._bases.get(name)
        if base is None:
            base = self._bases[name] = _truncnorm(self._base_rng, *self.dist[name], size)
        z = _truncnorm(self.rng, 0.0, 1.0, size, positive=False)
        return base * (1.0 + self.jitter * z)


def _knapsack_structure(cfg: FamilyConfig, rng: np.random.Generator) -> np.ndarray:
    mask = rng.random((cfg.resources, cfg.items)) < cfg.density
    # every item must consume something, otherwise it is free and trivially packed
    for j in range(cfg.items):
        if not mask[:, j].any():
            mask[rng.integers(cfg.resources), j] = True
    return mask


def _gen_knapsack(cfg: FamilyConfig, mask: np.ndarray, coef: _Coefficients, idx: int):
    r, k = cfg.resources, cfg.items
    W = np.maximum(np.round(coef.draw("weight", (r, k))), 1.0) * mask
    values = np.maximum(np.round(coef.draw("value", k)), 1.0)
    tight = _truncnorm(coef.rng, *coef.dist["tightness"], r)
    cap = np.floor(tight * W.sum(axis=1))
    return MilpInstance(id=f"mk-{cfg.seed}-{idx}", A=W, b=cap,
                        c=-values, J=tuple(range(k)))


def _gen_lot_sizing(cfg: FamilyConfig, coef: _Coefficients, idx: int):
    """Variables: production p_t, inventory I_t, lost sales u_t, setup y_t (binary)."""
    T = cfg.periods
    P, I, U, Y = (np.arange(T) + k * T for k in range(4))
    n = 4 * T
    demand = np.round(coef.draw("demand", T), 2)
    cap = np.round(coef.draw("capacity", T) * coef.dist["demand"][0], 2)
    c = np.zeros(n)
    c[P] = np.round(coef.draw("unit_cost", T), 3)
    c[I] = np.round(coef.draw("holding_cost", T), 3)
    c[U] = np.round(coef.draw("lost_sale_cost", T), 3)
    c[Y] = np.round(coef.draw("setup_cost", T), 3)
    rows, rhs = [], []
    for t in range(T):
        # I_{t-1} + p_t + u_t - I_t = d_t as two inequalities
        row = np.zeros(n)
        if t > 0:
            row[I[t - 1]] = 1.0
        row[P[t]] = 1.0
        row[U[t]] = 1.0
        row[I[t]] = -1.0
        rows += [row, -row]
        rhs += [demand[t], -demand[t]]
    for t in range(T):
        row = np.zeros(n)
        row[P[t]] = 1.0
        row[Y[t]] = -cap[t]
        rows.append(row)
        rhs.append(0.0)
    for var in np.concatenate([P, I, U]):
        row = np.zeros(n)
        row[var] = -1.0
        rows.append(row)
        rhs.append(0.0)
    return MilpInstance(id=f"ls-{cfg.seed}-{idx}", A=np.array(rows), b=np.array(rhs),
                        c=c, J=tuple(int(y) for y in Y))


def _zero_plan_feasible(inst: MilpInstance) -> bool:
    from .lp import solve_relaxation, Fixings, LpStatus

    res = solve_relaxation(inst, Fixings(frozenset(inst.J), frozenset()))
    return res.status is LpStatus.OPTIMAL


def generate_family(config: FamilyConfig, count: int) -> list:
    """Generate ``count`` same-structure instances; a pure function of (config, count)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    config.check()
    rng = np.random.default_rng(int(config.seed))
    mask = _knapsack_structure(config, rng) if config.family_kind == "multi_knapsack" else None
    coef = _Coefficients(config, rng)
    out = []
    for idx in range(count):
        for _ in range(MAX_RESAMPLE):
            if config.family_kind == "multi_knapsack":
                inst = _gen_knapsack(config, mask, coef, idx)
            else:
                inst = _gen_lot_sizing(config, coef, idx)
            if not validate(inst) and _zero_plan_feasible(inst):
                out.append(inst)
                break
        else:
            raise GenerationError(
                f"instance {idx}: feasibility not enforced after {MAX_RESAMPLE} attempts")
    return out


def validate(instance: MilpInstance) -> list:
    """Return a list of invariant violations (empty when the instance is well formed)."""
    problems = []
    m, n = instance.A.shape
    if n == 0 or instance.c.shape[0] != n:
        problems.append("A column count does not match length of c")
    if instance.b.shape[0] != m:
        problems.append("A row count does not match length of b")
    if len(instance.J) < 1:
        problems.append("binary set J is empty")
    if any(j < 0 or j >= instance.c.shape[0] for j in instance.J):
        problems.append("binary index out of range")
    if len(set(instance.J)) != len(instance.J):
        problems.append("duplicate binary index")
    if not np.all(np.isfinite(instance.A)):
        problems.append("non-finite constraint coefficient")
    if not np.all(np.isfinite(instance.b)):
        problems.append("non-finite right-hand side")
    if not np.all(np.isfinite(instance.c)):
        problems.append("non-finite objective coefficient")
    return problems


def same_structure(p: MilpInstance, q: MilpInstance) -> bool:
    return (p.A.shape == q.A.shape and p.J == q.J
            and np.array_equal(p.sparsity(), q.sparsity()))


# -- archive I/O --------------------------------------------------------------

ARCHIVE_FORMAT = "fmsts-instances"
ARCHIVE_VERSION = 1


def _enc(values) -> list:
    return [repr(float(v)) for v in np.ravel(values)]


def instance_to_dict(inst: MilpInstance) -> dict:
    return {
        "id": inst.id,
        "m": inst.m,
        "n": inst.n,
        "J": list(inst.J),
        "A": [_enc(row) for row in inst.A],
        "b": _enc(inst.b),
        "c": _enc(inst.c),
    }


def _reals(raw, where: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in raw], dtype=float)
    except (TypeError, ValueError) as exc:
        raise ArchiveFormatError(f"{where}: expected a list of real strings ({exc})") from None


def instance_from_dict(d: dict, where: str = "instance") -> MilpInstance:
    try:
        m, n = int(d["m"]), int(d["n"])
        rows = d["A"]
        ident, J, b_raw, c_raw = d["id"], d["J"], d["b"], d["c"]
    except KeyError as exc:
        raise ArchiveFormatError(f"{where}: missing field {exc.args[0]!r}") from None
    if len(rows) != m:
        raise InstanceValidationError(
            f"{where}: dimension mismatch, m={m} but A has {len(rows)} rows")
    A = np.zeros((m, n))
    for i, row in enumerate(rows):
        vals = _reals(row, f"{where}.A[{i}]")
        if vals.shape[0] != n:
            raise InstanceValidationError(
                f"{where}: dimension mismatch, n={n} but A[{i}] has {vals.shape[0]} entries")
        A[i] = vals
    b, c = _reals(b_raw, f"{where}.b"), _reals(c_raw, f"{where}.c")
    if b.shape[0] != m:
        raise InstanceValidationError(f"{where}: dimension mismatch, len(b)={b.shape[0]} != m={m}")
    if c.shape[0] != n:
        raise InstanceValidationError(f"{where}: dimension mismatch, len(c)={c.shape[0]} != n={n}")
    inst = MilpInstance(id=str(ident), A=A, b=b, c=c, J=tuple(int(j) for j in J))
    bad = validate(inst)
    if bad:
        raise InstanceValidationError(f"{where}: " + "; ".join(bad))
    return inst


def save(instances: Sequence[MilpInstance], path, config: FamilyConfig | None = None) -> Path:
    path = Path(path)
    doc = {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "family": config.to_dict() if config is not None else None,
        "instances": [instance_to_dict(i) for i in instances],
    }
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def load(path, with_config: bool = False):
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArchiveFormatError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or doc.get("format") != ARCHIVE_FORMAT:
        raise ArchiveFormatError(f"{path}: field 'format' is not {ARCHIVE_FORMAT!r}")
    if doc.get("version") != ARCHIVE_VERSION:
        raise ArchiveFormatError(f"{path}: unsupported archive version {doc.get('version')!r}")
    if not isinstance(doc.get("instances"), list):
        raise ArchiveFormatError(f"{path}: field 'instances' must be a list")
    instances = [instance_from_dict(d, f"instances[{k}]") for k, d in enumerate(doc["instances"])]
    if with_config:
        fam = doc.get("family")
        return instances, (FamilyConfig.from_dict(fam) if fam else None)
    return instances
