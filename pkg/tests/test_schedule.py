import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from styldiff.schedule import TimestepPlan, linear_schedule, make_plan, schedule_from_betas


def test_linear_endpoints():
    s = linear_schedule(1000, 1e-4, 0.02)
    assert s.beta[1] == 1e-4
    assert s.beta[1000] == pytest.approx(0.02, abs=1e-15)
    assert s.alpha_bar[0] == 1.0


def test_degenerate_betas_rejected():
    with pytest.raises(ValueError):
        linear_schedule(10, 0.0, 0.0)
    with pytest.raises(ValueError):
        linear_schedule(10, 0.02, 0.01)
    with pytest.raises(ValueError):
        linear_schedule(0)


def test_two_step_alpha_bar_by_hand():
    s = schedule_from_betas([0.1, 0.2])
    assert s.alpha_bar[1] == pytest.approx(0.9, abs=1e-15)
    assert s.alpha_bar[2] == pytest.approx(0.72, abs=1e-15)


def test_alpha_bar_monotone_and_recomputable():
    s = linear_schedule()
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert np.all((s.alpha_bar > 0) & (s.alpha_bar <= 1))
    direct = np.array([np.prod(s.alpha[1:t + 1]) for t in range(s.T + 1)])
    assert np.max(np.abs(direct - s.alpha_bar) / direct) <= 1e-12
    # recurrence holds exactly as stored
    assert np.array_equal(s.alpha_bar[1:], s.alpha_bar[:-1] * s.alpha[1:])


def test_schedule_arrays_are_read_only():
    s = linear_schedule(10)
    with pytest.raises(ValueError):
        s.alpha_bar[3] = 0.5


def test_plan_examples():
    assert make_plan(2, 601).steps == (0, 601)
    assert make_plan(5, 601).steps == (0, 150, 301, 451, 601)
    p = make_plan(40, 601)
    assert len(p) == 40 and p.steps[0] == 0 and p.steps[-1] == 601
    assert all(b > a for a, b in zip(p.steps, p.steps[1:]))


def test_plan_rejects_impossible():
    with pytest.raises(ValueError):
        make_plan(12, 10)
    with pytest.raises(ValueError):
        make_plan(1, 10)
    with pytest.raises(ValueError):
        make_plan(5, 1001, 1000)
    with pytest.raises(ValueError):
        TimestepPlan((0, 3, 3))


def test_plan_pairs_order():
    p = make_plan(4, 30)
    assert p.forward_pairs() == [(0, 10), (10, 20), (20, 30)]
    assert p.reverse_pairs() == [(30, 20), (20, 10), (10, 0)]


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 1000).flatmap(lambda tr: st.tuples(st.integers(2, tr + 1), st.just(tr))))
def test_plan_always_valid(args):
    S, T_return = args
    p = make_plan(S, T_return, 1000)
    assert len(p) == S
    assert p.steps[0] == 0 and p.steps[-1] == T_return
    assert all(b > a for a, b in zip(p.steps, p.steps[1:]))
    assert max(p.steps) <= 1000
