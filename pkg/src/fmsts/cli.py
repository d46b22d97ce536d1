"""Command line entry point: ``fmsts {gen,train,eval,solve,oracle,report}``.

Exit codes: 0 success, 2 usage/validation error, 3 training divergence,
4 oracle cap exceeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bnb, instances as inst_mod, oracle
from .instances import FamilyConfig
from .qnet import CheckpointError, IncompatibleCheckpoint, check_family, load_checkpoint, save_checkpoint
from .trainer import (LearnedPolicy, MetricsFormatError, TrainConfig, TrainingDiverged, baseline_means,
                      cross_validate, evaluate, split, substream, train_on)

EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_CAP = 4

log = logging.getLogger("fmsts")


class UsageError(Exception):
    pass


def _global_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", type=Path, help="JSON file whose keys mirror the flags")
    g.add_argument("--out", type=Path, default=Path("."), help="output directory")
    g.add_argument("--quiet", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parent = _global_parent()
    parser = argparse.ArgumentParser(prog="fmsts", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[parent], help="generate an instance family archive")
    p.add_argument("--family", choices=inst_mod.FAMILY_KINDS, default="multi_knapsack")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--items", type=int, default=20)
    p.add_argument("--resources", type=int, default=5)
    p.add_argument("--periods", type=int, default=6)
    p.add_argument("--density", type=float, default=1.0)
    p.add_argument("--tightness", type=float, nargs=2, metavar=("MEAN", "SPREAD"))
    p.add_argument("--weight", type=float, nargs=2, metavar=("MEAN", "SPREAD"))
    p.add_argument("--value", type=float, nargs=2, metavar=("MEAN", "SPREAD"))
    p.add_argument("--jitter", type=float,
                   help="per-instance relative noise around per-family base coefficients")
    p.add_argument("--name", default="instances.json", help="archive file name inside --out")

    p = sub.add_parser("train", parents=[parent], help="train a branching agent")
    p.add_argument("--instances", type=Path, required=True)
    p.add_argument("--arch", choices=("dense", "dueling", "mda"), default="mda")
    p.add_argument("--episodes", type=int, default=300)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--eval-every", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--steps-per-episode", type=int, default=4)
    p.add_argument("--buffer-capacity", type=int, default=50_000)
    p.add_argument("--sampling", choices=("prioritized", "uniform"), default="prioritized")
    p.add_argument("--pca-k", type=int, default=16)
    p.add_argument("--epsilon-start", type=float, default=1.0)
    p.add_argument("--epsilon-end", type=float, default=0.05)
    p.add_argument("--epsilon-decay", type=int)
    p.add_argument("--node-limit", type=int, default=bnb.DEFAULT_NODE_LIMIT)
    p.add_argument("--baselines", default="random,mostfrac,sb")
    p.add_argument("--folds", type=int, default=1, help=">= 2 runs cross-validation")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--record-time", action="store_true",
                   help="fill wall_ms (makes the metrics file run-dependent)")

    p = sub.add_parser("eval", parents=[parent], help="compare a checkpoint with baselines")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--instances", type=Path, required=True)
    p.add_argument("--baselines", default="random,mostfrac,sb")
    p.add_argument("--node-limit", type=int, default=bnb.DEFAULT_NODE_LIMIT)
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)

    p = sub.add_parser("solve", parents=[parent], help="solve one instance")
    p.add_argument("--instance-archive", type=Path, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--policy", choices=("mostfrac", "sb", "random", "learned"), default="mostfrac")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--node-limit", type=int, default=bnb.DEFAULT_NODE_LIMIT)
    p.add_argument("--dump", action="store_true", help="print per-node decisions and write tree.json")

    p = sub.add_parser("oracle", parents=[parent], help="exhaustive checks on a tiny instance")
    p.add_argument("--instance-archive", type=Path, required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--mode", choices=("min-tree", "verify-prop2", "brute-opt"), default="min-tree")
    p.add_argument("--child-order", choices=("engine_rule", "minimize_over_order"), default="engine_rule")

    p = sub.add_parser("report", parents=[parent], help="render learning curves to SVG")
    p.add_argument("--metrics", type=Path, nargs="+", required=True)
    p.add_argument("--baselines-file", type=Path, help="JSON {name: mean nodes} drawn as dashed lines")
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config {args.config}: {exc}")
        explicit = {a.lstrip("-").split("=")[0].replace("-", "_") for a in (argv or sys.argv[1:])
                    if a.startswith("--")}
        for key, value in overrides.items():
            key = key.replace("-", "_")
            if key not in vars(args):
                parser.error(f"--config: unknown key {key!r} for {args.command}")
            if key not in explicit:
                setattr(args, key, value)
        for key in ("out", "instances", "checkpoint", "instance_archive", "baselines_file"):
            if isinstance(getattr(args, key, None), str):
                setattr(args, key, Path(getattr(args, key)))
        if isinstance(getattr(args, "metrics", None), list):
            args.metrics = [Path(m) for m in args.metrics]
    return args


def _manifest(args, out_dir: Path, extra=None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: (str(v) if isinstance(v, Path) else [str(x) for x in v] if isinstance(v, list) else v)
                for k, v in sorted(vars(args).items())}
    doc = {"command": args.command, "args": resolved}
    if extra:
        doc.update(extra)
    (out_dir / f"manifest_{args.command}.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _say(args, *msg):
    if not args.quiet:
        print(*msg)


def _load_archive(path):
    try:
        return inst_mod.load(path, with_config=True)
    except (OSError, inst_mod.ArchiveFormatError, inst_mod.InstanceValidationError) as exc:
        raise UsageError(str(exc)) from None


def _pick(instances, index):
    if not 0 <= index < len(instances):
        raise UsageError(f"--index {index} out of range for an archive of {len(instances)} instances")
    return instances[index]


def _baseline_list(text) -> list:
    names = [b for b in text.split(",") if b] if text else []
    unknown = set(names) - set(bnb.BASELINES)
    if unknown:
        raise UsageError(f"unknown baselines {sorted(unknown)}; choose from {sorted(bnb.BASELINES)}")
    return names


def cmd_gen(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    dist = {}
    if args.family == "multi_knapsack":
        dist = {k: tuple(getattr(args, k)) for k in ("tightness", "weight", "value") if getattr(args, k)}
    fam = FamilyConfig(family_kind=args.family, items=args.items, periods=args.periods,
                       resources=args.resources, distributions=dist, density=args.density,
                       seed=args.seed, jitter=args.jitter)
    try:
        fam.check()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    family = inst_mod.generate_family(fam, args.count)
    args.out.mkdir(parents=True, exist_ok=True)
    path = inst_mod.save(family, args.out / args.name, fam)
    _manifest(args, args.out)
    p = family[0]
    print(path)
    _say(args, f"{len(family)} x {fam.family_kind}: m={p.m} n={p.n} |J|={len(p.J)} "
               f"nonzeros={int(p.sparsity().sum())}")
    return 0


def _train_config(args, n_total) -> TrainConfig:
    n_test = args.n_test if args.n_test is not None else n_total // 3
    n_train = args.n_train if args.n_train is not None else n_total - n_test
    cfg = TrainConfig(episodes=args.episodes, epsilon_start=args.epsilon_start,
                      epsilon_end=args.epsilon_end, epsilon_decay=args.epsilon_decay, lr=args.lr,
                      batch_size=args.batch_size, steps_per_episode=args.steps_per_episode,
                      buffer_capacity=args.buffer_capacity, sampling=args.sampling, pca_k=args.pca_k,
                      arch=args.arch, seed=args.seed, node_limit=args.node_limit, n_train=n_train,
                      n_test=n_test, eval_every=args.eval_every,
                      baselines=tuple(_baseline_list(args.baselines)), jobs=args.jobs,
                      record_time=args.record_time)
    try:
        cfg.check()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def cmd_train(args) -> int:
    family, _ = _load_archive(args.instances)
    cfg = _train_config(args, len(family))
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    if cfg.n_train + cfg.n_test > len(family):
        raise UsageError(f"archive holds {len(family)} instances, need n_train + n_test = "
                         f"{cfg.n_train + cfg.n_test}")
    if args.folds >= 2:
        cv = _cross_validate_archive(family, cfg, args.folds, out)
        _manifest(args, out, {"train_config": cfg.to_dict(), "folds_completed": cv.folds})
        _say(args, f"cross-validation over {cv.folds} folds written to {out}")
        return 0
    train_set, test_set = split(family, cfg.n_train, cfg.n_test, substream(cfg.seed, "split"))
    progress = None if args.quiet else (lambda r: print(
        f"iter {r['iteration']:>5}  test mean {r['mean_test_nodes']:.1f}  eps {r['epsilon']:.3f}"))
    try:
        net, pca, metrics = train_on(train_set, test_set, cfg, progress)
    except TrainingDiverged as exc:
        if exc.net is not None:
            save_checkpoint(exc.net, exc.pca, cfg.to_dict(), out / "diverged.bin")
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_checkpoint(net, pca, cfg.to_dict(), out / "checkpoint.bin")
    metrics.to_csv(out / "metrics.csv")
    baselines = baseline_means(test_set, cfg) if test_set else {}
    (out / "baselines.json").write_text(json.dumps(baselines, indent=1, sort_keys=True) + "\n")
    _manifest(args, out, {"train_config": cfg.to_dict()})
    _say(args, f"checkpoint: {out / 'checkpoint.bin'}")
    _say(args, f"metrics:    {out / 'metrics.csv'}")
    for name, value in baselines.items():
        _say(args, f"baseline {name}: mean test nodes {value:.1f}")
    return 0


def _cross_validate_archive(family, cfg, folds, out):
    from .trainer import CrossValidation, aggregate
    fold_rows, failures = [], []
    for f in range(folds):
        fcfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": cfg.seed + f})
        tr, te = split(family, cfg.n_train, cfg.n_test, substream(cfg.seed, f"fold-{f}"))
        try:
            _, _, m = train_on(tr, te, fcfg)
        except TrainingDiverged as exc:
            failures.append((f, str(exc)))
            continue
        m.to_csv(out / f"metrics_fold{f}.csv")
        fold_rows.append(m.rows)
    if not fold_rows:
        raise TrainingDiverged("every fold diverged")
    iters, mean, sd, half = aggregate(fold_rows)
    cv = CrossValidation(iters, mean, sd, half, len(fold_rows), fold_rows, failures)
    cv.to_csv(out / "metrics_aggregated.csv")
    return cv


def cmd_eval(args) -> int:
    family, _ = _load_archive(args.instances)
    policies = {}
    if args.checkpoint is not None:
        try:
            ckpt = load_checkpoint(args.checkpoint)
            for p in family:
                check_family(ckpt, p)
        except (OSError, CheckpointError) as exc:
            raise UsageError(str(exc)) from None
        policies["learned"] = LearnedPolicy(ckpt.net, ckpt.pca)
    for name in _baseline_list(args.baselines):
        factory = bnb.BASELINES[name]
        policies[name] = factory(args.seed) if name == "random" else factory()
    if not policies:
        raise UsageError("nothing to evaluate: give --checkpoint and/or --baselines")
    rows = {}
    for name, pol in policies.items():
        summ = evaluate(pol, family, args.node_limit, args.jobs)
        rows[name] = summ
    args.out.mkdir(parents=True, exist_ok=True)
    table = {name: {"mean": s.mean, "median": s.median, "limit_hits": s.limit_hits, "sizes": s.sizes}
             for name, s in rows.items()}
    (args.out / "eval.json").write_text(json.dumps(table, indent=1) + "\n")
    with open(args.out / "eval.csv", "w") as fh:
        fh.write("policy,mean_nodes,median_nodes,limit_hits\n")
        for name, s in rows.items():
            fh.write(f"{name},{s.mean!r},{s.median!r},{s.limit_hits}\n")
    _manifest(args, args.out)
    print(f"{'policy':<10} {'mean':>10} {'median':>10} {'limit':>6}")
    for name, s in rows.items():
        print(f"{name:<10} {s.mean:>10.2f} {s.median:>10.1f} {s.limit_hits:>6}")
    return 0


def _policy_from_args(args, instance):
    if args.policy == "learned":
        if args.checkpoint is None:
            raise UsageError("--policy learned needs --checkpoint")
        try:
            ckpt = load_checkpoint(args.checkpoint)
            check_family(ckpt, instance)
        except (OSError, CheckpointError) as exc:
            raise UsageError(str(exc)) from None
        return LearnedPolicy(ckpt.net, ckpt.pca)
    factory = bnb.BASELINES[args.policy]
    return factory(args.seed) if args.policy == "random" else factory()


def cmd_solve(args) -> int:
    family, _ = _load_archive(args.instance_archive)
    instance = _pick(family, args.index)
    policy = _policy_from_args(args, instance)
    try:
        rec = bnb.solve(instance, policy, seed=args.seed, epsilon=args.epsilon, node_limit=args.node_limit)
    except bnb.NodeLimitExceeded as exc:
        print(f"node limit {exc.limit} exceeded", file=sys.stderr)
        return 1
    print(f"instance {instance.id}: tree size {rec.total_nodes}, optimum {rec.incumbent!r}")
    if args.dump:
        for d in rec.decisions:
            print(f"  node {d.node_id:>6}  branch x{d.action}  V={int(rec.V[d.node_id])}"
                  f"{'  (random)' if d.was_random else ''}")
        args.out.mkdir(parents=True, exist_ok=True)
        rec.to_json(args.out / "tree.json")
    return 0


def cmd_oracle(args) -> int:
    family, _ = _load_archive(args.instance_archive)
    instance = _pick(family, args.index)
    try:
        if args.mode == "min-tree":
            res = oracle.min_tree_size(instance, child_order=args.child_order)
            print(f"min_tree_size {res.min_tree_size}")
            print(f"optimal_first_actions {sorted(res.optimal_first_actions)}")
            print(f"milp_optimum {res.milp_optimum!r}")
            print(f"nodes_explored {res.nodes_explored}")
        elif args.mode == "verify-prop2":
            rep = oracle.verify_prop2(instance, child_order=args.child_order)
            print(f"global_min {rep.global_min}")
            print(f"greedy {rep.greedy}")
            print(f"equal {rep.equal}")
            print(f"policies_enumerated {rep.policies_enumerated}")
        else:
            res = oracle.brute_force_optimum(instance)
            if res.feasible:
                print(f"optimum {res.objective!r}")
                print("assignment " + " ".join(f"x{j}={v}" for j, v in sorted(res.assignment.items())))
            else:
                print("infeasible")
            print(f"evaluated {res.evaluated}")
    except oracle.OracleCapExceeded as exc:
        print(f"oracle refused: {exc}", file=sys.stderr)
        return EXIT_CAP
    return 0


def cmd_report(args) -> int:
    from .report import write_report
    baselines = None
    if args.baselines_file is not None:
        baselines = json.loads(Path(args.baselines_file).read_text())
    out = args.out
    svg = out if out.suffix == ".svg" else out / "report.svg"
    svg.parent.mkdir(parents=True, exist_ok=True)
    try:
        svg_path, csv_path = write_report(args.metrics, svg, baselines)
    except (MetricsFormatError, OSError) as exc:
        raise UsageError(str(exc)) from None
    print(svg_path)
    _say(args, f"merged metrics: {csv_path}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "solve": cmd_solve,
            "oracle": cmd_oracle, "report": cmd_report}


def main(argv=None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"fmsts {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
