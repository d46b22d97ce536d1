import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fmsts import bnb, trainer
from fmsts.bnb import MostFractionalPolicy, compute_subtree_sizes
from fmsts.instances import FamilyConfig, MilpInstance, generate_family
from fmsts.qnet import QNetwork
from fmsts.trainer import (FMSTSBrancher, LearnedPolicy, TrainConfig, confidence_half_width, evaluate,
                           harvest, read_metrics_csv, static_input, train_on)


def _family(n=12, items=6, seed=2):
    return generate_family(FamilyConfig("multi_knapsack", items=items, resources=2, seed=seed, jitter=0.1), n)


def _cfg(**kw):
    base = dict(episodes=4, eval_every=2, n_train=8, n_test=4, pca_k=3, steps_per_episode=2, batch_size=8,
                baselines=("mostfrac",))
    base.update(kw)
    return TrainConfig(**base)


def _root_integral(count=3):
    # loose capacity: every item fits, the root LP is integral
    return [MilpInstance(id=f"ri{k}", A=np.array([[1.0, 2.0, 1.0 + k]]), b=np.array([10.0]),
                         c=-np.array([1.0, 2.0, 3.0 + k]), J=(0, 1, 2)) for k in range(count)]


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(episodes=0).check()
    with pytest.raises(ValueError):
        _cfg(epsilon_end=1.5).check()
    with pytest.raises(ValueError):
        _cfg(sampling="greedy").check()
    with pytest.raises(ValueError):
        _cfg(arch="cnn").check()
    assert TrainConfig.from_dict(_cfg().to_dict()) == _cfg()


def test_epsilon_schedule():
    cfg = _cfg(episodes=10, epsilon_start=1.0, epsilon_end=0.1)
    assert cfg.epsilon(0) == 1.0 and cfg.epsilon(6) == 0.1 and cfg.epsilon(9) == 0.1
    assert cfg.epsilon(3) == pytest.approx(0.55)
    assert all(0 <= cfg.epsilon(t) <= 1 for t in range(10))


def test_substreams_are_independent_and_stable():
    a = trainer.substream(3, "draw").integers(1 << 30, size=4)
    assert np.array_equal(a, trainer.substream(3, "draw").integers(1 << 30, size=4))
    assert not np.array_equal(a, trainer.substream(3, "explore").integers(1 << 30, size=4))


def test_root_integral_family_gives_no_experience():
    fam = _root_integral()
    net, pca, metrics = train_on(fam[:2], fam[2:], _cfg(episodes=1, eval_every=1, n_train=2, n_test=1))
    assert metrics.gradient_steps == 0 and metrics.episodes_run == 1
    assert [r["mean_test_nodes"] for r in metrics.rows] == [1.0, 1.0]
    assert evaluate(MostFractionalPolicy(), fam).mean == 1.0


def test_harvest_targets_match_subtree_sizes():
    fam = _family(6)
    pca = trainer.fit_pca(fam, 3)
    net = QNetwork("mda", pca.k, trainer.dynamic_length(6), 6, seed=1)
    for p in fam:
        rec = bnb.solve(p, LearnedPolicy(net, pca), seed=1, epsilon=0.5)
        V = compute_subtree_sizes(rec.nodes)
        exps = harvest(rec, p, static_input(p, pca), net)
        assert len(exps) == len(rec.decisions)
        for d, e in zip(rec.decisions, exps):
            nd = rec.nodes[d.node_id]
            assert e.target == V[d.node_id] == 1 + V[nd.child0_id] + V[nd.child1_id]
            assert e.v_root == rec.total_nodes and p.J[e.action] == d.action
            q = net.forward(e.static, e.dynamic)
            assert e.predicted == pytest.approx(q[e.action], rel=1e-12)


def test_training_is_deterministic():
    fam = _family()
    a = train_on(fam[:8], fam[8:], _cfg())
    b = train_on(fam[:8], fam[8:], _cfg())
    assert a[0].theta.tobytes() == b[0].theta.tobytes()
    assert str(a[2].rows) == str(b[2].rows)
    assert len(a[2].rows) == 4 // 2 + 1


def test_evaluate_matches_direct_solves():
    fam = _family(6)
    summ = evaluate(MostFractionalPolicy(), fam)
    direct = [bnb.solve(p, MostFractionalPolicy()).total_nodes for p in fam]
    assert summ.sizes == direct and summ.mean == np.mean(direct) and summ.median == np.median(direct)
    assert evaluate(MostFractionalPolicy(), fam).sizes == summ.sizes


def test_evaluate_reports_limit_hits():
    fam = _family(4, items=10)
    summ = evaluate(MostFractionalPolicy(), fam, node_limit=3)
    assert summ.limit_hits == sum(s is None for s in summ.sizes) > 0
    done = [s for s in summ.sizes if s is not None]
    assert (math.isnan(summ.mean) and not done) or summ.mean == np.mean(done)


def test_parallel_evaluation_matches_serial():
    fam = _family(4)
    pol = bnb.RandomPolicy(5)
    assert evaluate(pol, fam, jobs=2).sizes == evaluate(bnb.RandomPolicy(5), fam, jobs=1).sizes


def test_metrics_csv_round_trip(tmp_path):
    fam = _family()
    _, _, m = train_on(fam[:8], fam[8:], _cfg())
    m.to_csv(tmp_path / "m.csv")
    rows = read_metrics_csv(tmp_path / "m.csv")
    assert [r["iteration"] for r in rows] == [0, 2, 4]
    assert all(r["wall_ms"] == 0 for r in rows)
    for mine, back in zip(m.rows, rows):
        for k, v in mine.items():
            assert (math.isnan(v) and math.isnan(back[k])) or back[k] == v


@pytest.mark.parametrize("text,where", [("", "empty"), ("iteration,mean_test_nodes\n1,2\n3\n", "row 3"),
                                         ("iteration,mean_test_nodes\n1,x\n", "row 2"),
                                         ("a,b\n1,2\n", "row 1")])
def test_malformed_metrics(tmp_path, text, where):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(trainer.MetricsFormatError, match=where):
        read_metrics_csv(path)


def test_confidence_half_width_by_hand():
    vals = [10.0, 12.0, 17.0]
    sd = math.sqrt(((10 - 13) ** 2 + (12 - 13) ** 2 + (17 - 13) ** 2) / 2)
    assert confidence_half_width(vals) == pytest.approx(1.96 * sd / math.sqrt(3), rel=1e-14)
    assert math.isnan(confidence_half_width([4.0]))


def test_cross_validation_aggregates_fold_files(tmp_path):
    fam_cfg = FamilyConfig("multi_knapsack", items=6, resources=2, seed=2, jitter=0.1)
    cv = trainer.cross_validate(fam_cfg, _cfg(), folds=2, out_dir=tmp_path)
    assert cv.folds == 2 and not cv.failures
    folds = [read_metrics_csv(tmp_path / f"metrics_fold{f}.csv") for f in range(2)]
    agg = read_metrics_csv(tmp_path / "metrics_aggregated.csv")
    for k, row in enumerate(agg):
        vals = [f[k]["mean_test_nodes"] for f in folds]
        assert row["mean_test_nodes"] == pytest.approx(np.mean(vals), rel=1e-14)
        assert row["half_width"] == pytest.approx(confidence_half_width(vals), rel=1e-12, abs=1e-12)
    again = trainer.cross_validate(fam_cfg, _cfg(), folds=2)
    assert str(again.rows()) == str(cv.rows())


def test_train_writes_artifacts(tmp_path):
    fam_cfg = FamilyConfig("multi_knapsack", items=6, resources=2, seed=2, jitter=0.1)
    path, m = trainer.train(fam_cfg, _cfg(), out_dir=tmp_path)
    assert path.exists() and (tmp_path / "metrics.csv").exists()
    assert set(m.baselines) == {"mostfrac"} and m.net is not None


def test_estimator_api(tmp_path):
    fam = _family()
    est = FMSTSBrancher(**_cfg().to_dict())
    assert clone(est).get_params()["episodes"] == 4
    with pytest.raises(NotFittedError):
        est.predict(fam)
    est.fit(fam[:8], eval_set=fam[8:])
    sizes = est.predict(fam[8:])
    assert sizes.shape == (4,) and est.score(fam[8:]) == -sizes.mean()
    assert est.n_actions_ == 6 and len(est.metrics_.rows) == 3
    rec = bnb.solve(fam[9], est)
    assert rec.total_nodes == sizes[1]
    est.save(tmp_path / "e.bin")
    back = FMSTSBrancher.load(tmp_path / "e.bin")
    assert np.array_equal(back.predict(fam[8:]), sizes) and back.get_params() == est.get_params()
    with pytest.raises(ValueError):
        est.fit([])
