"""Learning a branching policy from observed subtree sizes.

One episode solves a training instance with the current network (epsilon-greedy),
turns every branched node into an experience whose target is the node's
observed subtree size, pushes them into a prioritised replay buffer and takes
a few Adam steps on the ``1/V(root)``-weighted squared error.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from . import bnb
from .bnb import NodeLimitExceeded
from .features import PcaModel, check_instances, dynamic_length, encode_dynamic, encode_static, fit_pca
from .instances import FamilyConfig, MilpInstance, generate_family
from .qnet import Adam, NonFiniteError, QNetwork, canonical_arch, save_checkpoint, select_action
from .replay import Experience, ReplayBuffer

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "mean_test_nodes", "median_test_nodes", "mean_train_nodes",
                  "loss", "epsilon", "limit_hits", "wall_ms")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, net=None, pca=None):
        super().__init__(message)
        self.net = net
        self.pca = pca


@dataclass
class TrainConfig:
    episodes: int = 300
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay: int | None = None  # episodes; None means 60% of the run
    lr: float = 1e-3
    batch_size: int = 64
    steps_per_episode: int = 4
    buffer_capacity: int = 50_000
    sampling: str = "prioritized"
    pca_k: int = 16
    arch: str = "mda"
    seed: int = 0
    node_limit: int = 50_000
    n_train: int = 50
    n_test: int = 100
    eval_every: int = 50
    baselines: tuple = ("random", "mostfrac", "sb")
    jobs: int = 1
    record_time: bool = False

    def check(self):
        for name in ("episodes", "batch_size", "buffer_capacity", "pca_k", "node_limit",
                     "n_train", "eval_every", "jobs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.steps_per_episode < 0 or self.n_test < 0 or self.lr <= 0:
            raise ValueError("steps_per_episode and n_test must be >= 0, lr > 0")
        for name in ("epsilon_start", "epsilon_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.sampling not in ("prioritized", "uniform"):
            raise ValueError("sampling must be 'prioritized' or 'uniform'")
        unknown = set(self.baselines) - set(bnb.BASELINES)
        if unknown:
            raise ValueError(f"unknown baselines {sorted(unknown)}")
        canonical_arch(self.arch)

    def epsilon(self, episode: int) -> float:
        horizon = self.epsilon_decay if self.epsilon_decay is not None else int(0.6 * self.episodes)
        if horizon <= 0 or episode >= horizon:
            return self.epsilon_end
        frac = episode / horizon
        return self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["baselines"] = list(self.baselines)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if "baselines" in d:
            d["baselines"] = tuple(d["baselines"])
        return cls(**d)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named source of randomness."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


# -- learned policy -------------------------------------------------------------

def static_input(instance: MilpInstance, pca: PcaModel) -> np.ndarray:
    """PCA projection divided by the training spread of each component."""
    return encode_static(instance, pca) / pca.scale


class LearnedPolicy:
    """Greedy policy ``argmin_a Q(s, a)`` over unfixed binaries."""

    name = "learned"

    def __init__(self, net: QNetwork, pca: PcaModel):
        self.net = net
        self.pca = pca
        self._static = {}

    def static_for(self, instance: MilpInstance) -> np.ndarray:
        s = self._static.get(instance.id)
        if s is None:
            s = static_input(instance, self.pca)
            self._static[instance.id] = s
        return s

    def q_values(self, node, instance) -> np.ndarray:
        return self.net.forward(self.static_for(instance), encode_dynamic(node, instance))

    def choose(self, node, instance) -> int:
        q = self.q_values(node, instance)
        fixed = node.fixings.fixed
        mask = [j not in fixed for j in instance.J]
        return int(instance.J[select_action(q, mask)])


# -- evaluation ---------------------------------------------------------------------

@dataclass
class EvalSummary:
    mean: float
    median: float
    sizes: list
    limit_hits: int = 0
    decision_seconds: float = 0.0
    decisions: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _policy_for(policy, index: int):
    spawn = getattr(policy, "spawn", None)
    return spawn(index) if spawn is not None else policy


def _solve_one(args):
    policy, instance, node_limit, index = args
    policy = _policy_for(policy, index)
    timed = _TimedPolicy(policy)
    try:
        rec = bnb.solve(instance, timed, epsilon=0.0, node_limit=node_limit)
    except NodeLimitExceeded:
        return None, timed.seconds, timed.calls
    return rec.total_nodes, timed.seconds, timed.calls


class _TimedPolicy:
    def __init__(self, policy):
        self.policy = policy
        self.seconds = 0.0
        self.calls = 0

    def choose(self, node, instance):
        t0 = time.perf_counter()
        a = self.policy.choose(node, instance)
        self.seconds += time.perf_counter() - t0
        self.calls += 1
        return a


def evaluate(policy, instances, node_limit: int = bnb.DEFAULT_NODE_LIMIT, jobs: int = 1) -> EvalSummary:
    """Greedy (epsilon = 0) tree sizes; limit hits are excluded from mean and median."""
    instances = list(instances)
    if isinstance(policy, (str, Path)):
        from .qnet import load_checkpoint, check_family
        ckpt = load_checkpoint(policy)
        for inst in instances:
            check_family(ckpt, inst)
        policy = LearnedPolicy(ckpt.net, ckpt.pca)
    work = [(policy, inst, node_limit, k) for k, inst in enumerate(instances)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_solve_one, work))
    else:
        results = [_solve_one(w) for w in work]
    sizes = [r[0] for r in results]
    done = [s for s in sizes if s is not None]
    mean = float(np.mean(done)) if done else math.nan
    median = float(np.median(done)) if done else math.nan
    return EvalSummary(mean=mean, median=median, sizes=sizes,
                       limit_hits=sum(s is None for s in sizes),
                       decision_seconds=float(sum(r[1] for r in results)),
                       decisions=int(sum(r[2] for r in results)))


# -- metrics --------------------------------------------------------------------------

@dataclass
class RunMetrics:
    rows: list = field(default_factory=list)
    baselines: dict = field(default_factory=dict)
    limit_hits: int = 0
    episodes_run: int = 0
    gradient_steps: int = 0

    def append(self, **row):
        self.rows.append({c: row.get(c, math.nan) for c in METRIC_COLUMNS})

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    @property
    def final_mean_test(self) -> float:
        return float(self.rows[-1]["mean_test_nodes"]) if self.rows else math.nan

    def to_csv(self, path) -> None:
        write_metrics_csv(self.rows, path)


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return repr(v)


def write_metrics_csv(rows, path, columns=METRIC_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


class MetricsFormatError(ValueError):
    pass


def read_metrics_csv(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MetricsFormatError(f"{path}: empty metrics file")
        if "iteration" not in header or "mean_test_nodes" not in header:
            raise MetricsFormatError(f"{path}: row 1: header lacks iteration/mean_test_nodes")
        for lineno, raw in enumerate(reader, start=2):
            if len(raw) != len(header):
                raise MetricsFormatError(f"{path}: row {lineno}: expected {len(header)} fields, got {len(raw)}")
            try:
                rows.append({h: float(v) for h, v in zip(header, raw)})
            except ValueError:
                raise MetricsFormatError(f"{path}: row {lineno}: non-numeric field") from None
    if not rows:
        raise MetricsFormatError(f"{path}: no data rows")
    return rows


# -- training loop --------------------------------------------------------------------

def harvest(record, instance, static, net: QNetwork) -> list:
    """One experience per branched node; target is the node's observed subtree size."""
    if not record.decisions:
        return []
    dyn = np.stack([encode_dynamic(record.nodes[d.node_id], instance) for d in record.decisions])
    pos = {j: k for k, j in enumerate(instance.J)}
    actions = np.array([pos[d.action] for d in record.decisions])
    q = net.forward(static, dyn)
    if q.ndim == 1:
        q = q[None, :]
    pred = q[np.arange(len(actions)), actions]
    v_root = int(record.V[0])
    return [Experience(instance.id, static, dyn[k], int(actions[k]),
                       int(record.V[d.node_id]), float(pred[k]), v_root)
            for k, d in enumerate(record.decisions)]


def fit_batch(net: QNetwork, opt: Adam, batch) -> tuple:
    static = np.stack([e.static for _, e in batch])
    dynamic = np.stack([e.dynamic for _, e in batch])
    actions = np.array([e.action for _, e in batch])
    targets = np.array([e.target for _, e in batch], dtype=float)
    weights = np.array([1.0 / e.v_root for _, e in batch])
    loss, grad = net.loss_and_grad(static, dynamic, actions, targets, weights)
    if not math.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss}")
    opt.step(net, grad)
    if not np.all(np.isfinite(net.theta)):
        raise NonFiniteError("non-finite parameters after update")
    fresh = net.forward(static, dynamic)[np.arange(len(actions)), actions]
    if not np.all(np.isfinite(fresh)):
        raise NonFiniteError("non-finite predictions after update")
    return loss, fresh


def train_on(train_set, test_set, config: TrainConfig, progress=None):
    """Run the episode loop on explicit train/test instance lists.

    Returns ``(net, pca, metrics)``.
    """
    config.check()
    train_set = check_instances(train_set)
    test_set = list(test_set)
    pca = fit_pca(train_set, config.pca_k)
    n_act = len(train_set[0].J)
    net = QNetwork(config.arch, pca.k, dynamic_length(n_act), n_act,
                   seed=int(substream(config.seed, "init").integers(2**63)))
    opt = Adam(lr=config.lr)
    buf = ReplayBuffer(config.buffer_capacity)
    draw_rng = substream(config.seed, "draw")
    explore_rng = substream(config.seed, "explore")
    replay_rng = substream(config.seed, "replay")
    statics = {p.id: static_input(p, pca) for p in train_set}
    metrics = RunMetrics()
    t_start = time.perf_counter()

    def wall():
        return int((time.perf_counter() - t_start) * 1000) if config.record_time else 0

    def eval_row(iteration, train_sizes, losses, eps, hits):
        if test_set:
            summ = evaluate(LearnedPolicy(net.copy(), pca), test_set, config.node_limit, config.jobs)
            mean, median = summ.mean, summ.median
            hits += summ.limit_hits
        else:
            mean = median = math.nan
        metrics.append(iteration=iteration, mean_test_nodes=mean, median_test_nodes=median,
                       mean_train_nodes=float(np.mean(train_sizes)) if train_sizes else math.nan,
                       loss=float(np.mean(losses)) if losses else math.nan,
                       epsilon=eps, limit_hits=hits, wall_ms=wall())
        if progress:
            progress(metrics.rows[-1])

    eval_row(0, [], [], config.epsilon(0), 0)
    train_sizes, losses, hits = [], [], 0
    for t in range(config.episodes):
        inst = train_set[int(draw_rng.integers(len(train_set)))]
        eps = config.epsilon(t)
        policy = LearnedPolicy(net, pca)
        policy._static = statics
        explore_seed = int(explore_rng.integers(2**63))
        try:
            record = bnb.solve(inst, policy, seed=explore_seed, epsilon=eps,
                               node_limit=config.node_limit)
        except NodeLimitExceeded:
            hits += 1
            metrics.limit_hits += 1
            record = None
        if record is not None:
            train_sizes.append(record.total_nodes)
            buf.push(harvest(record, inst, statics[inst.id], net))
        if len(buf):
            for _ in range(config.steps_per_episode):
                batch = buf.sample(config.batch_size, config.sampling, replay_rng)
                try:
                    loss, fresh = fit_batch(net, opt, batch)
                except NonFiniteError as exc:
                    raise TrainingDiverged(f"episode {t}: {exc}", net, pca) from exc
                buf.update_priorities([i for i, _ in batch], fresh)
                losses.append(loss)
                metrics.gradient_steps += 1
        metrics.episodes_run += 1
        if (t + 1) % config.eval_every == 0 or t + 1 == config.episodes:
            eval_row(t + 1, train_sizes, losses, eps, hits)
            train_sizes, losses, hits = [], [], 0
    return net, pca, metrics


def baseline_means(test_set, config: TrainConfig) -> dict:
    out = {}
    for name in config.baselines:
        factory = bnb.BASELINES[name]
        pol = factory(int(substream(config.seed, "baseline-random").integers(2**63))) \
            if name == "random" else factory()
        summ = evaluate(pol, test_set, config.node_limit, config.jobs)
        out[name] = summ.mean
    return out


def split(instances, n_train: int, n_test: int, rng: np.random.Generator):
    if n_train + n_test > len(instances):
        raise ValueError(f"need {n_train + n_test} instances, have {len(instances)}")
    perm = rng.permutation(len(instances))
    return [instances[k] for k in perm[:n_train]], [instances[k] for k in perm[n_train:n_train + n_test]]


def train(family: FamilyConfig, config: TrainConfig, out_dir=None, progress=None):
    """Generate a family, split it, train, and report baselines on the test split.

    Returns ``(checkpoint path or None, RunMetrics)``; the trained network and
    PCA model are attached to the metrics as ``metrics.net`` / ``metrics.pca``.
    """
    pool = generate_family(family, config.n_train + config.n_test)
    train_set, test_set = split(pool, config.n_train, config.n_test, substream(config.seed, "split"))
    est = FMSTSBrancher(**config.to_dict())
    est.fit(train_set, eval_set=test_set, progress=progress)
    metrics = est.metrics_
    metrics.baselines = baseline_means(test_set, config) if test_set else {}
    metrics.net, metrics.pca = est.net_, est.pca_
    path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "checkpoint.bin"
        est.save(path)
        metrics.to_csv(out_dir / "metrics.csv")
    return path, metrics


# -- cross validation ---------------------------------------------------------------

@dataclass
class CrossValidation:
    iterations: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    half_width: np.ndarray
    folds: int
    fold_metrics: list
    failures: list

    def rows(self) -> list:
        return [{"iteration": int(i), "mean_test_nodes": float(m), "sd_test_nodes": float(s),
                 "half_width": float(h), "folds": self.folds}
                for i, m, s, h in zip(self.iterations, self.mean, self.sd, self.half_width)]

    def to_csv(self, path) -> None:
        write_metrics_csv(self.rows(), path,
                          ("iteration", "mean_test_nodes", "sd_test_nodes", "half_width", "folds"))


def confidence_half_width(values) -> float:
    """Gaussian 95% half-width of the mean: ``1.96 * sd / sqrt(n)`` (sample sd)."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return math.nan
    return float(1.96 * values.std(ddof=1) / math.sqrt(values.size))


def aggregate(fold_rows: list) -> tuple:
    """Per-iteration mean, sd and half-width over folds of metric rows."""
    iters = np.array([r["iteration"] for r in fold_rows[0]])
    table = np.array([[r["mean_test_nodes"] for r in rows] for rows in fold_rows], dtype=float)
    mean = table.mean(axis=0)
    sd = table.std(axis=0, ddof=1) if len(fold_rows) > 1 else np.full(iters.shape, math.nan)
    half = np.array([confidence_half_width(table[:, k]) for k in range(table.shape[1])])
    return iters, mean, sd, half


def cross_validate(family: FamilyConfig, config: TrainConfig, folds: int, out_dir=None) -> CrossValidation:
    if folds < 2:
        raise ValueError("folds must be >= 2")
    pool = generate_family(family, config.n_train + config.n_test)
    fold_rows, failures = [], []
    for f in range(folds):
        cfg = TrainConfig.from_dict({**config.to_dict(), "seed": config.seed + f})
        tr, te = split(pool, cfg.n_train, cfg.n_test, substream(config.seed, f"fold-{f}"))
        try:
            _, _, m = train_on(tr, te, cfg)
        except (TrainingDiverged, ValueError) as exc:
            log.warning("fold %d failed: %s", f, exc)
            failures.append((f, str(exc)))
            continue
        fold_rows.append(m.rows)
        if out_dir is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            m.to_csv(Path(out_dir) / f"metrics_fold{f}.csv")
    if not fold_rows:
        raise RuntimeError("every fold failed")
    iters, mean, sd, half = aggregate(fold_rows)
    cv = CrossValidation(iters, mean, sd, half, len(fold_rows), fold_rows, failures)
    if out_dir is not None:
        cv.to_csv(Path(out_dir) / "metrics_aggregated.csv")
    return cv


# -- estimator ---------------------------------------------------------------------

class FMSTSBrancher(BaseEstimator):
    """Branching policy learned by fitting Q-values to observed subtree sizes.

    ``fit`` takes a list of same-structure :class:`MilpInstance`; after fitting
    the estimator is itself a branching policy (``choose``) usable with
    :func:`fmsts.bnb.solve`. ``predict`` returns the tree size of each given
    instance under the learned policy and ``score`` its negated mean.
    """

    def __init__(self, episodes=300, epsilon_start=1.0, epsilon_end=0.05, epsilon_decay=None,
                 lr=1e-3, batch_size=64, steps_per_episode=4, buffer_capacity=50_000,
                 sampling="prioritized", pca_k=16, arch="mda", seed=0, node_limit=50_000,
                 n_train=50, n_test=100, eval_every=50, baselines=("random", "mostfrac", "sb"),
                 jobs=1, record_time=False):
        self.episodes = episodes
        self.epsilon_start = epsilon_start
        self.epsilon_end = epsilon_end
        self.epsilon_decay = epsilon_decay
        self.lr = lr
        self.batch_size = batch_size
        self.steps_per_episode = steps_per_episode
        self.buffer_capacity = buffer_capacity
        self.sampling = sampling
        self.pca_k = pca_k
        self.arch = arch
        self.seed = seed
        self.node_limit = node_limit
        self.n_train = n_train
        self.n_test = n_test
        self.eval_every = eval_every
        self.baselines = baselines
        self.jobs = jobs
        self.record_time = record_time

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.get_params())

    def fit(self, X, y=None, eval_set=None, progress=None):
        X = check_instances(X)
        cfg = self.train_config()
        self.net_, self.pca_, self.metrics_ = train_on(X, eval_set or [], cfg, progress)
        self.policy_ = LearnedPolicy(self.net_, self.pca_)
        self.n_actions_ = len(X[0].J)
        return self

    def _check_fitted(self):
        if not hasattr(self, "policy_"):
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("FMSTSBrancher is not fitted yet; call fit first")

    def choose(self, node, instance) -> int:
        self._check_fitted()
        return self.policy_.choose(node, instance)

    def predict(self, X) -> np.ndarray:
        """Tree size of each instance under the greedy learned policy (NaN on limit hit)."""
        self._check_fitted()
        X = check_instances(X, require_same_structure=False)
        summ = evaluate(self.policy_, X, self.node_limit, self.jobs)
        return np.array([math.nan if s is None else s for s in summ.sizes], dtype=float)

    def score(self, X, y=None) -> float:
        return -float(np.nanmean(self.predict(X)))

    def save(self, path) -> None:
        self._check_fitted()
        save_checkpoint(self.net_, self.pca_, self.train_config().to_dict(), path)

    @classmethod
    def load(cls, path) -> "FMSTSBrancher":
        from .qnet import load_checkpoint
        ckpt = load_checkpoint(path)
        est = cls(**TrainConfig.from_dict(ckpt.config).to_dict())
        est.net_, est.pca_ = ckpt.net, ckpt.pca
        est.policy_ = LearnedPolicy(est.net_, est.pca_)
        est.n_actions_ = est.net_.n_actions
        return est
