import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core.walk import (
    ROOT,
    EdgeWeightTable,
    ResourceLimitError,
    Scheme,
    SchemeKind,
    VertexId,
    WalkConfig,
    WalkState,
    make_rng,
    neighbor_distribution,
    run,
    step,
    weight_after,
)

factors = st.floats(min_value=1.0, max_value=10.0, allow_nan=False, allow_infinity=False)
schemes = st.one_of(
    factors.map(Scheme.linear),
    factors.map(Scheme.once),
    st.builds(Scheme.ktimes, factors, st.integers(min_value=1, max_value=6)),
)


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


@pytest.mark.parametrize(
    "scheme, count, expected",
    [
        (Scheme.linear(2), 0, 1.0),
        (Scheme.linear(2), 3, 4.0),
        (Scheme.linear(1), 50, 1.0),
        (Scheme.once(3), 0, 1.0),
        (Scheme.once(3), 1, 3.0),
        (Scheme.once(3), 9, 3.0),
        (Scheme.ktimes(2, 2), 1, 2.0),
        (Scheme.ktimes(2, 2), 5, 3.0),
    ],
)
def test_weight_after_examples(scheme, count, expected):
    assert weight_after(scheme, count) == expected


@given(schemes, st.integers(min_value=0, max_value=200))
def test_weights_are_at_least_one_and_nondecreasing(scheme, count):
    assert weight_after(scheme, count) >= 1.0
    assert weight_after(scheme, count + 1) >= weight_after(scheme, count)


@given(factors, st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=100))
def test_ktimes_weight_freezes_after_cap(c, k_max, extra):
    scheme = Scheme.ktimes(c, k_max)
    assert weight_after(scheme, k_max + extra) == weight_after(scheme, k_max)


@given(factors, st.integers(min_value=0, max_value=50))
def test_ktimes_with_cap_one_is_once_reinforced(c, count):
    assert weight_after(Scheme.ktimes(c, 1), count) == pytest.approx(weight_after(Scheme.once(c), count))


def test_scheme_validation():
    with pytest.raises(ValueError):
        Scheme.linear(0.5)
    with pytest.raises(ValueError):
        Scheme(SchemeKind.KTIMES, 2.0)
    with pytest.raises(ValueError):
        Scheme(SchemeKind.ONCE, 2.0, 3)


def test_scheme_dict_round_trip():
    scheme = Scheme.ktimes(2.5, 4)
    assert Scheme.from_dict(scheme.to_dict()) == scheme
    assert scheme.label() == "ktimes(c=2.5,k=4)"


def test_walk_config_validation():
    with pytest.raises(ValueError):
        WalkConfig(b=1, scheme=Scheme.linear(2), horizon=10)
    with pytest.raises(ValueError):
        WalkConfig(b=2, scheme=Scheme.linear(2), horizon=-1)
    with pytest.raises(ValueError):
        WalkConfig(b=2, scheme=Scheme.linear(2), horizon=10, seed=2**64)


# ---------------------------------------------------------------------------
# Edge table and transitions
# ---------------------------------------------------------------------------


def test_vertex_ids():
    v = ROOT.child(1).child(0)
    assert v.depth == 2
    assert v.parent() == VertexId((1,))
    with pytest.raises(ValueError):
        ROOT.parent()


def test_edge_table_materializes_lazily():
    table = EdgeWeightTable(b=3, max_edges=100)
    assert len(table) == 1
    child = table.add_child(0, 2)
    assert table.path_of(child) == VertexId((2,))
    assert table.unvisited_index(0, 0) == 0
    assert table.unvisited_index(0, 1) == 1
    assert table.lookup(VertexId((1,))) is None
    assert table.traversals(VertexId((1,))) == 0


def test_root_distribution_is_uniform_over_children():
    state = WalkState(4, Scheme.linear(2))
    dist = neighbor_distribution(state)
    assert [v for v, _ in dist] == [ROOT.child(i) for i in range(4)]
    assert all(p == 0.25 for _, p in dist)


@pytest.mark.parametrize("scheme", [Scheme.linear(2), Scheme.once(2), Scheme.ktimes(2, 3)])
def test_distribution_after_first_step(scheme):
    state = WalkState(2, scheme)
    state.advance(0.0)
    dist = neighbor_distribution(state)
    assert dist == [
        (ROOT, 0.5),
        (VertexId((0, 0)), 0.25),
        (VertexId((0, 1)), 0.25),
    ]


def test_distribution_at_unvisited_vertex():
    state = WalkState(2, Scheme.linear(3))
    dist = neighbor_distribution(state, VertexId((1,)))
    assert [p for _, p in dist] == pytest.approx([1 / 3] * 3)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=2, max_value=5), schemes, st.integers(min_value=0, max_value=2**32), st.integers(0, 150))
def test_distribution_is_normalized_everywhere(b, scheme, seed, steps):
    state = WalkState(b, scheme)
    rng = make_rng(seed)
    for _ in range(steps):
        step(state, rng)
    dist = neighbor_distribution(state)
    probs = [p for _, p in dist]
    assert len(dist) == b + (1 if state.height > 0 else 0)
    assert all(p > 0 for p in probs)
    assert math.fsum(probs) == pytest.approx(1.0, abs=1e-12)


# ---------------------------------------------------------------------------
# Full walks
# ---------------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=2, max_value=6), schemes, st.integers(min_value=0, max_value=2**63), st.integers(0, 400))
def test_trace_invariants(b, scheme, seed, horizon):
    trace = run(WalkConfig(b, scheme, horizon, seed))
    heights = trace.heights
    assert heights[0] == 0
    assert len(heights) == horizon + 1
    assert np.all(heights >= 0)
    assert np.all(np.abs(np.diff(heights)) == 1)
    assert trace.table.total_traversals() == horizon
    assert len(trace.table) <= horizon + 1
    assert trace.max_height == heights.max()


def test_zero_horizon():
    trace = run(WalkConfig(3, Scheme.linear(2), 0, seed=1))
    assert trace.heights.tolist() == [0]
    assert trace.table.counts() == {}
    assert trace.speed == 0.0


def test_runs_are_deterministic():
    config = WalkConfig(3, Scheme.once(2.5), 2000, seed=123, replica=4)
    first, second = run(config), run(config)
    assert np.array_equal(first.heights, second.heights)
    assert first.table.counts() == second.table.counts()


def test_replicas_get_independent_streams():
    config = WalkConfig(2, Scheme.linear(2), 500, seed=5)
    assert not np.array_equal(run(config.with_replica(0)).heights, run(config.with_replica(1)).heights)


def test_unit_factor_makes_every_scheme_the_simple_walk():
    base = dict(b=3, horizon=3000, seed=99)
    traces = [run(WalkConfig(scheme=s, **base)) for s in (Scheme.linear(1), Scheme.once(1), Scheme.ktimes(1, 3))]
    assert np.array_equal(traces[0].heights, traces[1].heights)
    assert np.array_equal(traces[0].heights, traces[2].heights)


@pytest.mark.parametrize("c", [2.0, 3.0])
def test_ktimes_cap_one_walk_matches_once_walk(c):
    base = dict(b=2, horizon=3000, seed=11)
    once = run(WalkConfig(scheme=Scheme.once(c), **base))
    ktimes = run(WalkConfig(scheme=Scheme.ktimes(c, 1), **base))
    assert np.array_equal(once.heights, ktimes.heights)


def test_edge_budget_is_enforced():
    config = WalkConfig(5, Scheme.linear(1), 1000, seed=3, max_edges=10)
    with pytest.raises(ResourceLimitError):
        run(config)


def test_level_times_are_tracked_online():
    trace = run(WalkConfig(2, Scheme.linear(2), 1000, seed=8))
    for level, (first, last) in enumerate(zip(trace.first_visit, trace.last_visit)):
        visits = np.flatnonzero(trace.heights == level)
        assert first == visits[0]
        assert last == visits[-1]


def test_tilted_likelihood_ratio_by_hand():
    tilt = 0.5
    state = WalkState(2, Scheme.linear(2))
    for _ in range(3):
        assert state.advance(0.999, tilt)
    assert state.height == 3
    expected = ((2 + 2 * math.exp(tilt)) / (4 * math.exp(tilt))) ** 2
    assert math.exp(state.log_lr) == pytest.approx(expected, rel=1e-12)


def test_untilted_walk_has_unit_likelihood_ratio():
    trace = run(WalkConfig(2, Scheme.linear(2), 200, seed=1))
    assert trace.log_likelihood_ratio == 0.0


def test_two_step_forward_probability():
    config = WalkConfig(2, Scheme.linear(2), 2, seed=2024)
    replicas = 4000
    forward = sum(run(config.with_replica(r)).final_height == 2 for r in range(replicas))
    p = forward / replicas
    assert abs(p - 0.5) <= 4 * math.sqrt(0.25 / replicas)


def _depth_chain_speed(b: int, n: int, seed: int) -> float:
    """Birth-death chain of the simple walk's depth: reflect at 0, else up with probability b/(b+1)."""
    rng = np.random.default_rng(seed)
    up = rng.random(n) < b / (b + 1)
    h = 0
    for go_up in up:
        h = 1 if h == 0 else h + (1 if go_up else -1)
    return h / n


def test_simple_walk_speed_matches_depth_chain():
    n = 100_000
    walk_speed = run(WalkConfig(2, Scheme.linear(1), n, seed=17)).speed
    chain_speed = _depth_chain_speed(2, n, seed=17)
    assert walk_speed == pytest.approx(1 / 3, abs=0.02)
    assert chain_speed == pytest.approx(1 / 3, abs=0.02)
    assert abs(walk_speed - chain_speed) < 0.03
