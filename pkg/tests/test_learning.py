import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aolsim.learning import (
    Abstraction,
    AgeBinning,
    AlphaSchedule,
    ValueCurve,
    ValueLearningConfig,
    ValueTable,
    bin_index,
    feed_trace,
    td_update,
    terminal_td_error,
)
from aolsim.loopsim import AGE_FIELDS, IDEAL_LINK, LoopConfig, run_episode
from aolsim.lqr import CostWeights, solve_care
from aolsim.plant import PlantParams, linearize
from oracles import chain_values

B = AgeBinning()


@pytest.mark.parametrize("age, k", [(0.0, 0), (0.0049, 0), (0.005, 1), (0.015, 3), (0.0999, 19), (0.25, 19)])
def test_bin_examples(age, k):
    assert bin_index(age, B) == k


def test_bin_negative_rejected():
    with pytest.raises(ValueError):
        bin_index(-1e-9, B)


@given(st.floats(0, 1.0))
def test_bin_monotone_and_in_range(age):
    k = bin_index(age, B)
    assert 0 <= k < B.n_bins
    assert k <= bin_index(age + 0.001, B)


def test_edges():
    assert B.edges_ms()[0] == (0.0, 5.0) and B.edges_ms()[-1] == (95.0, 100.0)
    assert len(B.edges_ms()) == 20


def test_td_update_examples():
    t = ValueTable(3)
    assert td_update(t, 0, 1, 1.0, 1.0, 0.9) == 1.0
    assert t.v[0] == 1.0 and t.visits[0] == 1
    t.v[:] = [0.0, 2.0, 0.0]
    d = td_update(t, 0, 1, 1.0, 0.5, 0.5)
    assert d == pytest.approx(2.0) and t.v[0] == pytest.approx(1.0)


def test_td_update_terminal_drops_bootstrap():
    t = ValueTable(2)
    t.v[1] = 100.0
    td_update(t, 0, None, 3.0, 1.0, 0.99)
    assert t.v[0] == 3.0


@pytest.mark.parametrize("alpha, gamma", [(0.0, 0.9), (1.5, 0.9), (0.5, 0.0), (0.5, 1.1)])
def test_td_update_validation_leaves_table(alpha, gamma):
    t = ValueTable(2)
    with pytest.raises(ValueError):
        td_update(t, 0, 1, 1.0, alpha, gamma)
    assert t.v.tolist() == [0.0, 0.0] and t.visits.tolist() == [0, 0]


def test_chain_converges_to_analytic_values():
    ref = chain_values(3, 1.0, 0.9)
    assert ref == pytest.approx([2.71, 1.9, 1.0])
    t = ValueTable(3)
    for _ in range(500):
        td_update(t, 0, 1, 1.0, 0.5, 0.9)
        td_update(t, 1, 2, 1.0, 0.5, 0.9)
        td_update(t, 2, None, 1.0, 0.5, 0.9)
    np.testing.assert_allclose(t.v, [2.71, 1.9, 1.0], atol=1e-3)


def test_sample_mean_step_converges_to_mean():
    # alpha = 1/visits reproduces the running sample mean
    rng = np.random.default_rng(0)
    t = ValueTable(1)
    xs = rng.normal(2.0, 1.0, 20_000)
    for x in xs:
        td_update(t, 0, None, x, 1.0 / (t.visits[0] + 1), 0.9)
    assert t.v[0] == pytest.approx(xs.mean(), rel=1e-9)
    assert abs(t.v[0] - 2.0) < 4 / math.sqrt(len(xs))


def test_alpha_schedule():
    a = AlphaSchedule(0.5, 0.01)
    assert a(0) == 0.5 and a(100) == pytest.approx(0.25)
    assert AlphaSchedule(0.5, 0.0)(10**6) == 0.5


def test_unvisited_bins_are_nan():
    t = ValueTable(4)
    td_update(t, 1, None, 2.0, 1.0, 0.9)
    r = ValueCurve(Abstraction.DL_AOL, t, AgeBinning(0.005, 4)).reward()
    assert r[1] == -2.0
    assert np.isnan(r[[0, 2, 3]]).all()


def test_abstraction_columns():
    assert [a.column for a in Abstraction] == [AGE_FIELDS.index(a.value) for a in Abstraction]


@pytest.mark.parametrize(
    "kw", [dict(episodes=0), dict(gamma=0.0), dict(alpha0=0.0), dict(kappa=-1), dict(behavior="x"), dict(behavior="fixed")]
)
def test_value_config_validation(kw):
    with pytest.raises(ValueError):
        ValueLearningConfig(**kw)


def test_feed_trace_matches_stepwise_updates():
    p = PlantParams()
    w = CostWeights.identity()
    sol = solve_care(linearize(p), w)
    tr = run_episode(LoopConfig(dt_in=0.005, horizon=0.3), p, sol, w, 3, 3, lambda a, c: 100e3,
                     plant_rng=np.random.default_rng(1))
    alpha = AlphaSchedule(0.5, 0.01)
    fast = ValueTable(20)
    err = feed_trace(fast, tr, Abstraction.DL_AOL.column, B, alpha, 0.99)
    slow = ValueTable(20)
    bins = [bin_index(a, B) for a in tr.age_series("dl_aol")] + [bin_index(tr.final_ages.dl_aol, B)]
    deltas = [
        td_update(slow, bins[k], bins[k + 1], tr.stage_cost[k], alpha(slow.visits[bins[k]]), 0.99)
        for k in range(tr.n_steps)
    ]
    np.testing.assert_allclose(fast.v, slow.v, rtol=1e-12)
    assert err == pytest.approx(np.mean(np.abs(deltas)))


def test_feed_trace_terminal_penalty():
    p = PlantParams(noise_sigma=60.0)
    w = CostWeights.identity()
    sol = solve_care(linearize(p), w)
    tr = run_episode(LoopConfig(dt_in=0.02, horizon=5.0, terminal_penalty=50.0), p, sol, w, 1, 1,
                     lambda a, c: 100e3, plant_rng=np.random.default_rng(1))
    assert tr.termination == "fallen"
    t = ValueTable(20)
    feed_trace(t, tr, Abstraction.DL_AOL.column, B, AlphaSchedule(1.0, 0.0), 0.99)
    last = bin_index(tr.age_series("dl_aol")[-1], B)
    assert t.v[last] == pytest.approx(tr.stage_cost[-1] + 50.0)


def test_terminal_td_error_window():
    c = ValueCurve(Abstraction.DL_AOL, ValueTable(1), B, td_error=list(range(100)))
    assert terminal_td_error(c, 0.1) == pytest.approx(94.5)


def test_ideal_link_keeps_ages_in_first_bins():
    p = PlantParams()
    w = CostWeights.identity()
    sol = solve_care(linearize(p), w)
    tr = run_episode(LoopConfig(dt_in=0.001, horizon=0.5), p, sol, w, 1, 1, lambda a, c: 100e3, link=IDEAL_LINK,
                     plant_rng=np.random.default_rng(0))
    t = ValueTable(20)
    feed_trace(t, tr, Abstraction.DL_AOL.column, B, AlphaSchedule(), 0.99)
    assert t.visited[0] and not t.visited[2:].any()
