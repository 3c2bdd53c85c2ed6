import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from multiexit.errors import InvalidInputError, ThresholdWarning
from multiexit.evaluation import ExitScores
from multiexit.policy import (
    ECE_FLOOR,
    ExitPolicy,
    decide,
    first_exit,
    global_sweep,
    heuristic_thresholds,
    minmax_normalize,
    msp,
    percentile_candidates,
    random_multi_search,
    raw_heuristic_thresholds,
    sweep_values,
)

unit = st.floats(0, 1)
open_unit = st.floats(1e-6, 1 - 1e-6)


def test_msp_examples():
    assert msp(np.full(16, 1 / 16)) == 0.0625
    assert msp([0, 1, 0]) == 1.0
    assert msp(np.exp([2, 0, 0]) / np.exp([2, 0, 0]).sum()) == pytest.approx(0.78699, abs=1e-5)
    with pytest.raises(InvalidInputError):
        msp([])


# decide


def test_decide_examples():
    d = decide(ExitPolicy.global_threshold(0.9), [0.6, 0.95], [3, 4], 7)
    assert (d.exit_index, d.prediction, d.confidence) == (1, 4, 0.95)
    d = decide(ExitPolicy.global_threshold(0.9), [0.6, 0.5], [3, 4], 7)
    assert d.is_final and d.prediction == 7 and d.confidence is None
    d = decide(ExitPolicy.multi([0.99, 0.99, 0.99]), [1.0, 1.0, 0.2], [2, 5, 1], 0)
    assert d.exit_index == 0 and d.prediction == 2
    d = decide(ExitPolicy.global_threshold(0.5), [0.5], [1], 0, costs=[0.3, 1.0])
    assert d.exit_index == 0 and d.cost_fraction == 0.3
    with pytest.raises(InvalidInputError):
        decide(ExitPolicy.multi([0.5, 0.5]), [0.1, 0.2, 0.3], [0, 0, 0], 0)
    with pytest.raises(InvalidInputError):
        decide(ExitPolicy.global_threshold(0.5), [0.1, 0.2], [0], 0)


@given(st.integers(1, 6).flatmap(lambda b: st.tuples(
    arrays(np.float64, st.tuples(st.integers(1, 20), st.just(b)), elements=unit),
    arrays(np.float64, b, elements=open_unit),
)))
def test_vectorized_first_exit_matches_decide(case):
    conf, taus = case
    idx = first_exit(conf, taus)
    for i in range(conf.shape[0]):
        d = decide(taus, conf[i], np.zeros(conf.shape[1], dtype=int), 0)
        assert idx[i] == (conf.shape[1] if d.is_final else d.exit_index)
        if not d.is_final:
            assert conf[i, d.exit_index] >= taus[d.exit_index]
            assert np.all(conf[i, : d.exit_index] < taus[: d.exit_index])


@given(st.integers(1, 6).flatmap(lambda b: st.tuples(
    arrays(np.float64, st.tuples(st.integers(1, 30), st.just(b)), elements=unit),
    arrays(np.float64, b, elements=open_unit),
    arrays(np.float64, b, elements=st.floats(0, 1)),
)))
def test_raising_thresholds_never_exits_earlier(case):
    conf, taus, bump = case
    higher = np.minimum(taus + bump * (1 - taus), 1 - 1e-9)
    assert np.all(first_exit(conf, higher) >= first_exit(conf, taus))


def test_first_exit_batched_thresholds():
    conf = np.array([[0.2, 0.9], [0.95, 0.1]])
    taus = np.array([[0.5, 0.5], [0.99, 0.05], [0.1, 0.1]])
    np.testing.assert_array_equal(first_exit(conf, taus), [[1, 0], [1, 1], [0, 0]])


# heuristic


def test_heuristic_raw_endpoints():
    raw = raw_heuristic_thresholds([0.3, 0.0, 0.8], [0.3, 0.2, 0.1])
    assert raw[0] == 0.0 and raw[1] == 1.0
    assert raw[2] == pytest.approx(-7.0)


def test_heuristic_worked_example():
    taus = heuristic_thresholds([0.8, 0.9], [0.1, 0.05], 0.05)
    # by hand: raw = [-7, -17], range widened to [-17.05, -6.95]
    expected = [(-7 + 17.05) / 10.1, (-17 + 17.05) / 10.1]
    np.testing.assert_allclose(taus, expected, atol=1e-12)
    np.testing.assert_allclose(taus, [0.99505, 0.00495], atol=1e-5)


def test_ece_floor_is_flagged():
    with pytest.warns(ThresholdWarning, match="floored"):
        raw = raw_heuristic_thresholds([0.5, 0.5], [0.0, 0.1])
    assert raw[0] == 1 - 0.5 / ECE_FLOOR
    with pytest.warns(ThresholdWarning):
        pol = ExitPolicy.heuristic([0.5, 0.5], [0.0, 0.1])
    assert pol.flags and "floored" in pol.flags[0]


def test_single_exit_heuristic_is_half():
    with pytest.warns(ThresholdWarning):
        assert heuristic_thresholds([0.7], [0.1]).tolist() == [0.5]


def test_heuristic_rejects_bad_inputs():
    with pytest.raises(InvalidInputError):
        heuristic_thresholds([0.5, 0.5], [0.1], 0.05)
    with pytest.raises(InvalidInputError):
        heuristic_thresholds([0.5, 0.5], [0.1, 0.2], 0.0)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=10), st.floats(1e-3, 10),
       st.floats(0.1, 10), st.floats(-50, 50))
def test_normalization_properties(raw, eps, scale, shift):
    t = minmax_normalize(raw, eps)
    assert np.all((t > 0) & (t < 1))
    r = np.asarray(raw)
    for i in range(r.size):
        for j in range(r.size):
            if r[i] < r[j]:
                assert t[i] <= t[j]
            if r[i] == r[j]:
                assert t[i] == t[j]
    # rescaling raw values together with epsilon leaves thresholds unchanged
    np.testing.assert_allclose(minmax_normalize(r * scale + shift, eps * scale), t, atol=1e-9)


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(1e-3, 1)), min_size=2, max_size=8), st.floats(1e-3, 1))
def test_heuristic_thresholds_inside_unit_interval(pairs, eps):
    acc, e = zip(*pairs)
    t = heuristic_thresholds(acc, e, eps)
    assert np.all((t > 0) & (t < 1))


# policy objects


def test_policy_validation_and_json(tmp_path):
    for bad in (0.0, 1.0, -0.1, float("nan")):
        with pytest.raises(InvalidInputError):
            ExitPolicy.global_threshold(bad)
    with pytest.raises(InvalidInputError):
        ExitPolicy("global", (0.5, 0.6))
    with pytest.raises(InvalidInputError):
        ExitPolicy("learned", (0.5,))
    with pytest.raises(InvalidInputError):
        ExitPolicy.multi([0.5, 0.5]).resolve(3)
    np.testing.assert_array_equal(ExitPolicy.global_threshold(0.3).resolve(4), [0.3] * 4)
    pol = ExitPolicy.heuristic([0.8, 0.9], [0.1, 0.05], 0.05)
    d = json.loads(pol.to_json())
    assert d["kind"] == "heuristic" and d["epsilon"] == 0.05 and len(d["thresholds"]) == 2
    path = tmp_path / "p.json"
    path.write_text(pol.to_json())
    assert ExitPolicy.load(path) == pol
    assert ExitPolicy.from_dict(ExitPolicy.global_threshold(0.4).to_dict()).thresholds == (0.4,)


# candidates and search


def test_constant_msp_gives_one_candidate():
    c = percentile_candidates(np.full((50, 2), 0.8))
    assert [x.tolist() for x in c] == [[0.8], [0.8]]


def test_candidates_on_a_grid_sample():
    col = np.repeat(np.arange(1, 10) / 10, 10)
    np.random.default_rng(0).shuffle(col)
    (c,) = percentile_candidates(col[:, None])
    np.testing.assert_allclose(c, np.arange(1, 10) / 10)


def test_candidates_match_inverted_cdf_percentiles():
    m = np.random.default_rng(1).random((137, 4))
    cands = percentile_candidates(m)
    for j, c in enumerate(cands):
        ref = np.unique(np.percentile(m[:, j], range(10, 100, 10), method="inverted_cdf"))
        np.testing.assert_array_equal(c, ref)
        assert np.all(np.diff(c) > 0)


def test_candidates_are_clamped_and_warn_when_coarse():
    with pytest.warns(ThresholdWarning, match="coarser"):
        c = percentile_candidates(np.array([[1.0], [1.0], [0.0]]))
    assert np.all((c[0] > 0) & (c[0] < 1))


def _fake_evaluator(taus):
    taus = np.atleast_2d(taus)
    return taus.mean(axis=1), 1 - taus.max(axis=1)


def test_search_is_exhaustive_when_grid_fits():
    grids = [np.linspace(0.1, 0.9, 9)] * 5
    pts = random_multi_search(grids, 1_000_000, _fake_evaluator)
    assert len(pts) == 9**5 == 59_049
    assert len({r.tobytes() for r in pts.taus}) == 59_049


def test_search_samples_distinct_grid_points():
    grids = [np.linspace(0.1, 0.9, 9)] * 5
    pts = random_multi_search(grids, 100, _fake_evaluator, seed=3)
    assert len(pts) == 100
    assert len({r.tobytes() for r in pts.taus}) == 100
    assert all(np.isin(pts.taus[:, j], grids[j]).all() for j in range(5))
    again = random_multi_search(grids, 100, _fake_evaluator, seed=3)
    np.testing.assert_array_equal(pts.taus, again.taus)
    other = random_multi_search(grids, 100, _fake_evaluator, seed=4)
    assert not np.array_equal(pts.taus, other.taus)
    one = random_multi_search(grids, 1, _fake_evaluator)
    assert len(one) == 1 and one.pareto.tolist() == [True]


def test_search_on_astronomical_grid():
    grids = [np.linspace(0.1, 0.9, 9)] * 21
    pts = random_multi_search(grids, 50, _fake_evaluator, seed=0)
    assert len({r.tobytes() for r in pts.taus}) == 50


def test_search_errors():
    with pytest.raises(InvalidInputError):
        random_multi_search([np.array([0.5]), np.array([])], 10, _fake_evaluator)
    with pytest.raises(InvalidInputError):
        random_multi_search([np.array([0.5])], 0, _fake_evaluator)


def test_search_pareto_flags(tmp_path):
    pts = random_multi_search([np.array([0.2, 0.5, 0.8])] * 2, 100, _fake_evaluator)
    for i in range(len(pts)):
        dominated = np.any(
            (pts.accuracy >= pts.accuracy[i])
            & (pts.latency_reduction >= pts.latency_reduction[i])
            & ((pts.accuracy > pts.accuracy[i]) | (pts.latency_reduction > pts.latency_reduction[i]))
        )
        duplicate = np.any((pts.accuracy[:i] == pts.accuracy[i]) & (pts.latency_reduction[:i] == pts.latency_reduction[i]))
        assert pts.pareto[i] == (not dominated and not duplicate)
    path = tmp_path / "s.csv"
    pts.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "tau_vector,accuracy,latency_reduction,pareto"
    assert len(lines) == 10 and lines[1].startswith("0.2;0.2,")


# global sweep


def test_sweep_values():
    v = sweep_values(0.05)
    assert v.size == 21
    assert v[0] == 0.001 and v[-1] == 0.999
    np.testing.assert_allclose(v[1:-1], np.arange(1, 20) * 0.05)
    assert sweep_values(0.25).tolist() == [0.001, 0.25, 0.5, 0.75, 0.999]
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(InvalidInputError):
            sweep_values(bad)


def _scores(seed=0, n=200, b=4):
    rng = np.random.default_rng(seed)
    conf = rng.uniform(0.2, 0.99, size=(n, b))
    labels = rng.integers(0, 5, size=n)
    preds = np.where(rng.random((n, b)) < 0.7, labels[:, None], (labels[:, None] + 1) % 5)
    final = np.where(rng.random(n) < 0.9, labels, (labels + 2) % 5)
    costs = np.tile(np.append(np.linspace(0.2, 0.8, b), 1.0), (n, 1))
    return ExitScores(conf, preds, final, labels, costs, [f"Encoder({i + 1})" for i in range(b)])


def test_sweep_endpoints_and_monotone_latency():
    s = _scores()
    pts = global_sweep(0.05, s.metrics)
    assert len(pts) == 21
    assert np.all(np.diff(pts.latency_reduction) <= 0)
    # no confidence reaches 0.999: everything goes to the final classifier
    assert pts.latency_reduction[-1] == 0.0
    assert pts.accuracy[-1] == np.mean(s.final_predictions == s.labels)
    # every confidence reaches 0.001: everything leaves at exit 0
    assert pts.latency_reduction[0] == pytest.approx(1 - 0.2)
    assert pts.accuracy[0] == np.mean(s.predictions[:, 0] == s.labels)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000))
def test_latency_is_nonincreasing_in_global_tau(seed):
    s = _scores(seed)
    taus = np.sort(np.random.default_rng(seed).random(30))[:, None]
    _, lat = s.metrics(taus)
    assert np.all(np.diff(lat) <= 0)
