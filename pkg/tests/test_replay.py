import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from fmsts.replay import PRIORITY_FLOOR, Experience, ExperienceError, ReplayBuffer, priority

STATIC = np.zeros(2)


def _exp(target=10, predicted=5.0, v_root=20, tag="p", action=0):
    return Experience(tag, STATIC, np.zeros(3), action, target, predicted, v_root)


def test_priority_formula():
    assert priority(8, 6.0) == pytest.approx(2 / 8 + 1e-3, abs=1e-15)
    assert priority(5, 5.0) == PRIORITY_FLOOR
    e1, e2 = priority(10, 8.0), priority(10, 6.0)
    assert (e2 - PRIORITY_FLOOR) == pytest.approx(2 * (e1 - PRIORITY_FLOOR))


def test_invalid_experiences_rejected():
    buf = ReplayBuffer(4)
    with pytest.raises(ExperienceError, match="target"):
        buf.push([_exp(), _exp(target=2, v_root=20)])
    assert len(buf) == 0 and buf.counter == 0
    with pytest.raises(ExperienceError, match="v_root"):
        buf.push([_exp(target=30, v_root=20)])
    with pytest.raises(ExperienceError, match="non-finite"):
        buf.push([_exp(predicted=np.nan)])


def test_fifo_eviction_and_counter():
    buf = ReplayBuffer(2)
    buf.push([_exp(tag=str(k)) for k in range(3)])
    assert [buf.get(i).instance_id for i in (1, 2)] == ["1", "2"] and buf.first_index == 1
    buf.push([])
    assert buf.counter == 3 and len(buf) == 2
    buf.push([_exp(tag="3"), _exp(tag="4")])
    assert buf.counter == 5 and [buf.get(i).instance_id for i in (3, 4)] == ["3", "4"]


def test_static_is_shared_not_copied():
    buf = ReplayBuffer(4)
    buf.push([_exp(), _exp()])
    assert buf.get(0).static is buf.get(1).static is STATIC


def test_probabilities_examples():
    buf = ReplayBuffer(4)
    # normalized errors 1.0 and 3.0 once the floor is removed
    buf.push([Experience("a", STATIC, np.zeros(1), 0, 10, 0.0, 10, priority=1.0),
              Experience("b", STATIC, np.zeros(1), 0, 10, 0.0, 10, priority=3.0)])
    assert buf.probabilities().tolist() == [0.25, 0.75]
    eq = ReplayBuffer(3)
    eq.push([_exp(), _exp(), _exp()])
    assert np.allclose(eq.probabilities(), eq.probabilities("uniform"))


def test_empty_buffer_and_bad_mode():
    with pytest.raises(ValueError):
        ReplayBuffer(3).sample(2)
    buf = ReplayBuffer(3)
    buf.push([_exp()])
    with pytest.raises(ValueError):
        buf.sample(2, mode="greedy")


def test_prioritized_frequencies_chi_square():
    buf = ReplayBuffer(4)
    buf.push([_exp(target=10, predicted=p) for p in (10.0, 8.0, 4.0, 0.0)])
    probs = buf.probabilities()
    draws = buf.sample(100_000, rng=np.random.default_rng(0))
    counts = np.bincount([i for i, _ in draws], minlength=4)
    assert chisquare(counts, probs * counts.sum()).pvalue > 0.01


def test_sampling_is_deterministic_given_rng():
    buf = ReplayBuffer(10)
    buf.push([_exp(predicted=float(k)) for k in range(6)])
    a = [i for i, _ in buf.sample(50, rng=np.random.default_rng(4))]
    b = [i for i, _ in buf.sample(50, rng=np.random.default_rng(4))]
    assert a == b


def test_update_priorities_and_stale_indices():
    buf = ReplayBuffer(2)
    buf.push([_exp(tag="0"), _exp(tag="1")])
    buf.update_priorities([1], [10.0])
    assert buf.get(1).priority == PRIORITY_FLOOR
    buf.update_priorities([0], [7.0])
    assert buf.get(0).priority == pytest.approx(0.3 + 1e-3, abs=1e-15)
    buf.push([_exp(tag="2")])
    buf.update_priorities([0, 2], [1.0, 4.0])
    assert buf.stale_updates == 1
    assert buf.priorities()[-1] == pytest.approx(0.6 + 1e-3)


@settings(max_examples=40, deadline=None)
@given(cap=st.integers(1, 8), pushes=st.lists(st.integers(0, 5), max_size=8))
def test_buffer_invariants(cap, pushes):
    buf = ReplayBuffer(cap)
    total = 0
    for n in pushes:
        buf.push([_exp(tag=str(total + k), predicted=float(k)) for k in range(n)])
        total += n
        assert len(buf) == min(total, cap) and buf.counter == total
        assert np.all(buf.priorities() > 0)
        if len(buf):
            ids = [int(e.instance_id) for _, e in buf.sample(20, rng=np.random.default_rng(total))]
            assert min(ids) >= total - len(buf)
