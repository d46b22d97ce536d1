import json
import re
from pathlib import Path

import numpy as np
import pytest

from fmsts import bnb, instances as ins
from fmsts.cli import main
from fmsts.trainer import evaluate, read_metrics_csv


def _gen(tmp_path, name="fam", count=10, items=6, seed=4, extra=()):
    out = tmp_path / name
    assert main(["gen", "--family", "multi_knapsack", "--count", str(count), "--items", str(items),
                 "--resources", "2", "--seed", str(seed), "--jitter", "0.1", "--out", str(out),
                 "--quiet", *extra]) == 0
    return out / "instances.json"


def test_gen_archive_and_determinism(tmp_path, capsys):
    a = _gen(tmp_path, "a")
    b = _gen(tmp_path, "b")
    assert len(ins.load(a)) == 10
    assert a.read_bytes() == b.read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest_gen.json").read_text())
    assert manifest["args"]["count"] == 10 and manifest["args"]["seed"] == 4
    assert str(a) in capsys.readouterr().out


def test_gen_usage_errors(tmp_path):
    assert main(["gen", "--count", "0", "--out", str(tmp_path)]) == 2
    assert main(["gen", "--items", "0", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as err:
        main(["gen", "--family", "tsp"])
    assert err.value.code == 2


def test_config_file_mirrors_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"count": 3, "items": 4, "jitter": 0.05, "seed": 8}))
    out = tmp_path / "o"
    assert main(["gen", "--config", str(cfg), "--out", str(out), "--quiet", "--seed", "9"]) == 0
    fam, fc = ins.load(out / "instances.json", with_config=True)
    assert len(fam) == 3 and fc.items == 4 and fc.jitter == 0.05 and fc.seed == 9
    cfg.write_text(json.dumps({"colour": "red"}))
    with pytest.raises(SystemExit):
        main(["gen", "--config", str(cfg)])


def _train(tmp_path, arch="mda", name="run", extra=()):
    arch_path = _gen(tmp_path, "fam_" + name)
    out = tmp_path / name
    code = main(["train", "--instances", str(arch_path), "--arch", arch, "--episodes", "5", "--eval-every", "5",
                 "--n-train", "6", "--n-test", "4", "--pca-k", "3", "--batch-size", "8",
                 "--baselines", "mostfrac", "--seed", "1", "--out", str(out), "--quiet", *extra])
    return code, out, arch_path


@pytest.mark.parametrize("arch", ["dense", "dueling", "mda"])
def test_train_smoke(tmp_path, arch):
    code, out, _ = _train(tmp_path, arch)
    assert code == 0
    for f in ("checkpoint.bin", "metrics.csv", "manifest_train.json", "baselines.json"):
        assert (out / f).exists()
    assert len(read_metrics_csv(out / "metrics.csv")) == 5 // 5 + 1


def test_train_is_bit_reproducible(tmp_path):
    _, a, _ = _train(tmp_path, name="r1")
    _, b, _ = _train(tmp_path, name="r2")
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()


def test_train_divergence_exit_code(tmp_path):
    code, out, _ = _train(tmp_path, name="div", extra=("--lr", "1e300"))
    assert code == 3
    assert (out / "diverged.bin").exists()


def test_train_cross_validation(tmp_path):
    code, out, _ = _train(tmp_path, name="cv", extra=("--folds", "2"))
    assert code == 0
    rows = read_metrics_csv(out / "metrics_aggregated.csv")
    assert all(r["folds"] == 2 for r in rows)


def test_eval_table_matches_direct_evaluation(tmp_path, capsys):
    _, run, fam_path = _train(tmp_path)
    capsys.readouterr()
    out = tmp_path / "ev"
    assert main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--instances", str(fam_path),
                 "--baselines", "random,mostfrac,sb", "--jobs", "1", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    table = json.loads((out / "eval.json").read_text())
    assert set(table) == {"learned", "random", "mostfrac", "sb"}
    for row in table.values():
        assert set(row) == {"mean", "median", "limit_hits", "sizes"}
    fam = ins.load(fam_path)
    assert table["mostfrac"]["sizes"] == evaluate(bnb.MostFractionalPolicy(), fam).sizes
    assert table["learned"]["sizes"] == evaluate(str(run / "checkpoint.bin"), fam).sizes
    assert re.search(r"^learned\s+[\d.]+", text, re.M)


def test_eval_on_root_integral_set(tmp_path, capsys):
    fam = [ins.MilpInstance(id=f"r{k}", A=np.array([[1.0, 1.0]]), b=np.array([5.0]), c=-np.array([1.0, k + 1.0]),
                            J=(0, 1)) for k in range(3)]
    path = ins.save(fam, tmp_path / "ri.json")
    assert main(["eval", "--instances", str(path), "--baselines", "random,mostfrac,sb", "--out",
                 str(tmp_path / "e"), "--jobs", "1"]) == 0
    table = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert all(row["mean"] == 1.0 for row in table.values())


def test_eval_family_mismatch(tmp_path):
    _, run, _ = _train(tmp_path)
    other = _gen(tmp_path, "other", count=2, items=8)
    assert main(["eval", "--checkpoint", str(run / "checkpoint.bin"), "--instances", str(other),
                 "--out", str(tmp_path / "e")]) == 2


def test_solve_outputs_and_errors(tmp_path, capsys):
    path = _gen(tmp_path)
    capsys.readouterr()
    out = tmp_path / "s"
    assert main(["solve", "--instance-archive", str(path), "--index", "3", "--policy", "mostfrac", "--dump",
                 "--out", str(out)]) == 0
    text = capsys.readouterr().out
    rec = bnb.solve(ins.load(path)[3], bnb.MostFractionalPolicy())
    assert f"tree size {rec.total_nodes}," in text and f"optimum {rec.incumbent!r}" in text
    assert text.count("branch x") == len(rec.decisions)
    assert json.loads((out / "tree.json").read_text())["total_nodes"] == rec.total_nodes
    assert main(["solve", "--instance-archive", str(path), "--index", "10"]) == 2
    assert main(["solve", "--instance-archive", str(path), "--policy", "learned"]) == 2


def test_oracle_modes(tmp_path, capsys):
    path = _gen(tmp_path, items=5)
    capsys.readouterr()
    assert main(["oracle", "--instance-archive", str(path), "--mode", "brute-opt"]) == 0
    assert main(["oracle", "--instance-archive", str(path), "--mode", "min-tree"]) == 0
    assert main(["oracle", "--instance-archive", str(path), "--mode", "verify-prop2"]) == 0
    text = capsys.readouterr().out
    assert "equal True" in text and "evaluated 32" in text
    big = _gen(tmp_path, "big", count=1, items=16)
    assert main(["oracle", "--instance-archive", str(big), "--mode", "min-tree"]) == 4
    assert main(["oracle", "--instance-archive", str(big), "--mode", "verify-prop2"]) == 4


def test_report_command(tmp_path, capsys):
    _, run, _ = _train(tmp_path)
    svg = tmp_path / "rep" / "curve.svg"
    assert main(["report", "--metrics", str(run / "metrics.csv"), "--baselines-file",
                 str(run / "baselines.json"), "--out", str(svg)]) == 0
    text = svg.read_text()
    assert text.count("<polyline") == 1 and "stroke-dasharray" in text
    assert svg.with_suffix(".csv").exists()
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["report", "--metrics", str(empty), "--out", str(tmp_path / "x.svg")]) == 2
