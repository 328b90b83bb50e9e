import math

import numpy as np
import pytest

from adapters.replicas import ProcessPoolRunner, SerialRunner
from core.estimators import (
    Decay,
    InsufficientDataError,
    ReplicaOutcome,
    TailEstimate,
    TailMethod,
    choose_tilt,
    decay_classify,
    increment_tail_fit,
    lemma_tail_check,
    lower_lattice_level,
    rate_curve,
    regen_moments,
    simulate,
    speed_direct,
    speed_ratio,
    subadditivity_audit,
    tail_from_outcomes,
    tail_lower,
    tail_lower_tilted,
    tail_upper,
    tail_upper_tilted,
    tilted_from_outcomes,
    upper_lattice_threshold,
)
from core.oracle import exact_distribution
from core.regeneration import TruncationParams, default_margin, regenerate
from core.walk import Scheme, WalkConfig, run


def outcome(final_height, horizon=10, log_lr=0.0, replica=0):
    return ReplicaOutcome(replica, horizon, final_height, log_lr)


def exact_point(n, p, stderr=0.0):
    return TailEstimate(n, 0.0, p, stderr, TailMethod.EXACT)


# ---------------------------------------------------------------------------
# Replica farm
# ---------------------------------------------------------------------------


def test_simulate_orders_by_replica():
    config = WalkConfig(2, Scheme.linear(2), 50, seed=9)
    outcomes = simulate(config, 5, runner=SerialRunner(), first_replica=3)
    assert [o.replica for o in outcomes] == [3, 4, 5, 6, 7]
    assert all(o.horizon == 50 for o in outcomes)


def test_pool_matches_serial():
    config = WalkConfig(3, Scheme.once(2), 300, seed=21)
    serial = simulate(config, 12, margin=2, runner=SerialRunner())
    pooled = simulate(config, 12, margin=2, runner=ProcessPoolRunner(2))
    assert serial == pooled


def test_regeneration_outcomes_drop_the_initial_block():
    config = WalkConfig(2, Scheme.linear(2), 2000, seed=4)
    (o,) = simulate(config, 1, margin=3, runner=SerialRunner())
    full = regenerate(run(config.with_replica(0)), TruncationParams(margin=3))
    confirmed = [r.tau for r in full.records if r.confirmed]
    assert len(confirmed) >= 3
    assert len(o.pairs) == len(full.pairs) - 1
    assert sum(dt for dt, _ in o.pairs) == confirmed[-1] - confirmed[1]


def test_regeneration_height_never_exceeds_endpoint():
    config = WalkConfig(3, Scheme.once(2), 400, seed=12)
    for o in simulate(config, 30, margin=0, runner=SerialRunner()):
        assert o.h_n <= o.final_height


def test_regen_event_is_censored_by_the_default_margin():
    n, replicas = 40, 400
    config = WalkConfig(2, Scheme.once(2), n, seed=6)
    outcomes = simulate(config, replicas, margin=default_margin(2, 2), runner=SerialRunner())
    assert all(o.h_n < o.final_height for o in outcomes if o.final_height > 0)

    endpoint = tail_upper(config, 0.1, n, replicas, speed=0.2, runner=SerialRunner())
    regen = tail_upper(config, 0.1, n, replicas, speed=0.2, event="regen", runner=SerialRunner())
    uncensored = tail_upper(config, 0.1, n, replicas, speed=0.2, event="regen", margin=0, runner=SerialRunner())
    assert endpoint.threshold == regen.threshold == 12
    assert regen.p_hat < endpoint.p_hat
    assert regen.hits <= uncensored.hits <= endpoint.hits


def test_upper_tail_rejects_unknown_events():
    with pytest.raises(ValueError):
        tail_upper(WalkConfig(2, Scheme.linear(2), 10), 0.1, 10, 5, speed=0.5, event="maximum")


# ---------------------------------------------------------------------------
# Speed
# ---------------------------------------------------------------------------


def test_speed_direct_mean_and_error():
    est = speed_direct([outcome(2), outcome(4), outcome(6)])
    assert est.estimate == pytest.approx(0.4)
    assert est.stderr == pytest.approx(0.2 / math.sqrt(3))
    assert est.replicas == 3


def test_speed_direct_needs_two_replicas():
    with pytest.raises(InsufficientDataError):
        speed_direct([outcome(3)])


def test_speed_direct_rejects_mixed_horizons():
    with pytest.raises(ValueError):
        speed_direct([outcome(3, horizon=10), outcome(3, horizon=20)])


def test_speed_ratio_constant_increments():
    est = speed_ratio([(2, 1)] * 40)
    assert est.estimate == 0.5
    assert est.stderr == 0.0
    assert speed_ratio([(1, 1)] * 30).estimate == 1.0


def test_speed_ratio_needs_thirty_pairs():
    with pytest.raises(InsufficientDataError):
        speed_ratio([(1, 1)] * 29)


def test_regen_moments_with_truncation():
    pairs = [(2, 1), (4, 3), (30, 2), (3, 12)] * 10
    mom = regen_moments(pairs, TruncationParams(N=10, M=20))
    assert mom.A_hat == pytest.approx(39 / 4)
    assert mom.B_hat == pytest.approx(18 / 4)
    assert mom.m_trunc == 20
    assert mom.A_trunc == pytest.approx(3.0)
    assert mom.B_trunc == pytest.approx(2.0)


def test_speed_estimates_agree_on_simple_walk():
    config = WalkConfig(2, Scheme.linear(1), 20_000, seed=77)
    outcomes = simulate(config, 20, margin=3, runner=SerialRunner())
    direct = speed_direct(outcomes)
    ratio = speed_ratio([p for o in outcomes for p in o.pairs])
    assert direct.estimate == pytest.approx(1 / 3, abs=4 * direct.stderr + 0.005)
    assert abs(direct.estimate - ratio.estimate) <= 4 * math.hypot(direct.stderr, ratio.stderr) + 0.005


# ---------------------------------------------------------------------------
# Tails
# ---------------------------------------------------------------------------


def test_zero_hits_give_rule_of_three():
    est = tail_from_outcomes([outcome(2)] * 50, threshold=8)
    assert est.zero_hit
    assert est.p_hat == pytest.approx(3 / 50)
    assert not est.usable


def test_trivial_upper_threshold_is_exact():
    est = tail_upper(WalkConfig(2, Scheme.linear(2), 10), epsilon=-0.2, n=10, replicas=5, speed=0.1)
    assert est.p_hat == 1.0
    assert est.method is TailMethod.EXACT


def test_upper_threshold_validation():
    with pytest.raises(ValueError):
        tail_upper(WalkConfig(2, Scheme.linear(2), 10), epsilon=0.5, n=10, replicas=5, speed=0.7)


def test_naive_upper_tail_matches_oracle():
    n, replicas = 6, 20_000
    config = WalkConfig(2, Scheme.linear(2), n, seed=101)
    est = tail_upper(config, epsilon=0.1, n=n, replicas=replicas, speed=0.5, runner=SerialRunner())
    exact = float(exact_distribution(config, n).at_least(0.6 * n))
    assert est.method is TailMethod.NAIVE
    assert abs(est.p_hat - exact) <= 4 * math.sqrt(exact * (1 - exact) / replicas)


def test_all_forward_probability_of_simple_walk():
    n, replicas = 5, 20_000
    est = tail_upper(WalkConfig(2, Scheme.linear(1), n, seed=55), 1.0, n, replicas, speed=0.0, runner=SerialRunner())
    p = (2 / 3) ** (n - 1)
    assert abs(est.p_hat - p) <= 4 * math.sqrt(p * (1 - p) / replicas)


def test_zero_tilt_reproduces_naive_estimate():
    n, replicas = 6, 2_000
    config = WalkConfig(2, Scheme.once(2), n, seed=3)
    naive = tail_upper(config, 0.2, n, replicas, speed=0.5, runner=SerialRunner())
    tilted = tail_upper_tilted(config, 0.2, n, replicas, tilt=0.0, speed=0.5, runner=SerialRunner())
    assert tilted.p_hat == naive.p_hat
    assert tilted.hits == naive.hits


def test_tilted_upper_tail_is_unbiased():
    n, replicas = 6, 20_000
    config = WalkConfig(2, Scheme.linear(2), n, seed=202)
    est = tail_upper_tilted(config, 0.3, n, replicas, tilt=0.5, speed=0.5, runner=SerialRunner())
    exact = float(exact_distribution(config, n).at_least(0.8 * n))
    assert est.method is TailMethod.TILTED
    assert est.ess > 10
    assert abs(est.p_hat - exact) <= 4 * est.stderr


def test_lower_tail_matches_oracle():
    n, replicas = 6, 20_000
    config = WalkConfig(2, Scheme.linear(2), n, seed=303)
    exact = float(exact_distribution(config, n).at_most(2))
    naive = tail_lower(config, 2, n, replicas, runner=SerialRunner())
    tilted = tail_lower_tilted(config, 2, n, replicas, tilt=-0.5, runner=SerialRunner())
    assert abs(naive.p_hat - exact) <= 4 * math.sqrt(exact * (1 - exact) / replicas)
    assert abs(tilted.p_hat - exact) <= 4 * tilted.stderr


def test_lower_tail_edge_cases():
    config = WalkConfig(2, Scheme.linear(2), 5)
    assert tail_lower(config, 5, 5, 10).p_hat == 1.0
    with pytest.raises(ValueError):
        tail_lower(config, -1, 5, 10)
    with pytest.raises(ValueError):
        tail_lower_tilted(config, 1, 5, 10, tilt=0.5)
    with pytest.raises(ValueError):
        tail_upper_tilted(config, 0.1, 5, 10, tilt=-0.5, speed=0.5)


def test_no_hits_under_tilting_is_degenerate():
    outcomes = [outcome(2, log_lr=-0.5, replica=i) for i in range(20)]
    est = tilted_from_outcomes(outcomes, threshold=8, upper=True, tilt=0.25)
    assert est.hits == 0
    assert est.p_hat == 0.0
    assert est.ess == 0.0
    assert est.degenerate_ess


def test_upper_tail_is_nonincreasing_in_threshold():
    n, replicas = 30, 300
    config = WalkConfig(2, Scheme.once(2), n, seed=17)
    estimates = [tail_upper(config, eps, n, replicas, speed=0.2, runner=SerialRunner()) for eps in (0.05, 0.1, 0.2, 0.3, 0.5)]
    hits = [e.hits for e in estimates]
    assert hits == sorted(hits, reverse=True)
    assert hits[0] > hits[-1]


@pytest.mark.parametrize(
    "x, n, expected",
    [(3.6, 6, 4), (4.0, 6, 4), (4.2, 6, 6), (2.5, 5, 3), (3.2, 5, 5), (0.3 * 40, 40, 12)],
)
def test_upper_lattice_threshold(x, n, expected):
    assert upper_lattice_threshold(x, n) == expected


@pytest.mark.parametrize("x, n, expected", [(1, 10, 0), (1, 11, 1), (2.7, 6, 2), (0, 5, -1)])
def test_lower_lattice_level(x, n, expected):
    assert lower_lattice_level(x, n) == expected


def test_unreachable_lower_level_is_exactly_zero():
    est = tail_lower(WalkConfig(2, Scheme.linear(2), 5), 0, 5, 10)
    assert est.method is TailMethod.EXACT
    assert est.p_hat == 0.0
    assert not est.usable


@pytest.mark.slow
@pytest.mark.parametrize("tilt", [0.0, 0.25, 0.5])
def test_tilted_estimator_is_unbiased_over_repetitions(tilt):
    n, repetitions, replicas = 6, 200, 500
    config = WalkConfig(2, Scheme.linear(2), n, seed=404)
    exact = float(exact_distribution(config, n).at_least(6))
    outcomes = simulate(config, repetitions * replicas, tilt=tilt, runner=SerialRunner())
    estimates = np.array(
        [
            tilted_from_outcomes(outcomes[i * replicas : (i + 1) * replicas], 6, True, tilt).p_hat
            for i in range(repetitions)
        ]
    )
    pooled_stderr = estimates.std(ddof=1) / math.sqrt(repetitions)
    assert abs(estimates.mean() - exact) <= 3 * pooled_stderr


def test_choose_tilt_returns_grid_member():
    config = WalkConfig(2, Scheme.linear(2), 10, seed=5)
    tilt, table = choose_tilt(config, 10, threshold=9, pilot_replicas=50, runner=SerialRunner())
    assert tilt in (0.0, 0.25, 0.5, 1.0)
    assert set(table) == {0.0, 0.25, 0.5, 1.0}
    lower, table = choose_tilt(config, 10, threshold=0, upper=False, pilot_replicas=50, runner=SerialRunner())
    assert lower <= 0
    assert set(table) == {0.0, -0.25, -0.5, -1.0}


# ---------------------------------------------------------------------------
# Rates and decay
# ---------------------------------------------------------------------------


def test_rate_curve_of_exponential_decay():
    estimates = [exact_point(n, math.exp(-0.3 * n)) for n in (5, 10, 20, 40, 80, 160)]
    curve = rate_curve(estimates)
    assert all(p.rate == pytest.approx(0.3, abs=1e-12) for p in curve.points)
    assert curve.plateau == pytest.approx(0.3, abs=1e-12)
    assert curve.plateau_ci == pytest.approx((0.3, 0.3), abs=1e-12)
    assert not curve.too_few_points


def test_rate_curve_of_polynomial_decay():
    estimates = [exact_point(n, n**-2.0) for n in (10, 100, 1000, 10_000)]
    curve = rate_curve(estimates)
    for point in curve.points:
        assert point.rate == pytest.approx(2 * math.log(point.n) / point.n)


def test_rate_curve_skips_zero_hits_and_flags_short_grids():
    estimates = [exact_point(5, 0.1), exact_point(10, 0.01), TailEstimate(20, 0.0, 0.01, 0.0, TailMethod.NAIVE, zero_hit=True)]
    curve = rate_curve(estimates)
    assert [p.n for p in curve.points] == [5, 10]
    assert curve.too_few_points
    assert curve.plateau is None


def test_subadditivity_audit_on_exponential_sequence():
    grid = [8, 10, 12, 17, 19, 21, 23, 25]
    estimates = [exact_point(n, math.exp(-0.3 * n), stderr=1e-3 * math.exp(-0.3 * n)) for n in grid]
    rows = subadditivity_audit(estimates, N=10, b=2)
    assert {(r.n, r.m) for r in rows} == {(8, 8), (8, 10), (10, 8), (8, 12), (12, 8), (10, 10), (10, 12), (12, 10), (12, 12)}
    assert all(r.ok for r in rows)


def _decay_points(kind, param, rng, noise=0.01):
    ns = [10, 20, 40, 80, 160]
    out = []
    for n in ns:
        p = 10 * n**-param if kind == "poly" else math.exp(-param * n)
        p *= 1 + noise * rng.standard_normal()
        out.append((n, p, noise * p))
    return out


def test_decay_classify_polynomial():
    report = decay_classify(_decay_points("poly", 1.7, np.random.default_rng(1)))
    assert report.decay is Decay.POLYNOMIAL
    assert report.poly_slope == pytest.approx(-1.7, abs=0.1)


def test_decay_classify_exponential():
    report = decay_classify(_decay_points("exp", 0.25, np.random.default_rng(2)))
    assert report.decay is Decay.EXPONENTIAL
    assert report.exp_rate == pytest.approx(0.25, abs=0.02)


def test_decay_classify_flat_is_inconclusive():
    report = decay_classify([(n, 0.5, 0.01) for n in (10, 20, 40, 80, 160)])
    assert report.decay is Decay.INCONCLUSIVE


def test_decay_classify_accuracy():
    rng = np.random.default_rng(3)
    correct = 0
    for trial in range(100):
        if trial % 2:
            points, truth = _decay_points("poly", rng.uniform(1.0, 3.0), rng), Decay.POLYNOMIAL
        else:
            points, truth = _decay_points("exp", rng.uniform(0.05, 0.5), rng), Decay.EXPONENTIAL
        correct += decay_classify(points).decay is truth
    assert correct >= 95


def test_decay_classify_input_checks():
    with pytest.raises(InsufficientDataError):
        decay_classify([(10, 0.1, 0.01), (20, 0.05, 0.01), (40, 0.02, 0.01), (80, 0.01, 0.001)])
    with pytest.raises(InsufficientDataError):
        decay_classify([(n, 0.1, 0.01) for n in (10, 12, 14, 16, 18)])
    with pytest.raises(InsufficientDataError):
        decay_classify([(n, 0.0, 0.0) for n in (10, 20, 40, 80, 160)])


def test_decay_classify_counts_excluded_points():
    points = _decay_points("exp", 0.2, np.random.default_rng(4)) + [(320, 0.0, 0.0)]
    assert decay_classify(points).excluded == 1


def test_decay_classify_is_not_driven_by_precise_early_points():
    replicas = 20_000
    p_hat = [0.176, 0.0838, 0.0298, 0.00675, 0.0006]
    points = [(n, p, math.sqrt(p * (1 - p) / replicas)) for n, p in zip((10, 20, 40, 80, 160), p_hat)]
    report = decay_classify(points)
    assert report.decay is Decay.EXPONENTIAL
    assert report.aic_gap > 2


# ---------------------------------------------------------------------------
# Increment tails
# ---------------------------------------------------------------------------


def test_geometric_tail_rate():
    rng = np.random.default_rng(8)
    values = rng.geometric(0.3, size=10_000)
    fit = increment_tail_fit([(int(v), 1) for v in values], which="delta_t", bootstrap=50)
    assert fit.rate == pytest.approx(-math.log(0.7), abs=0.04)
    assert fit.rate_ci[0] <= fit.rate <= fit.rate_ci[1]
    assert not fit.degenerate


def test_constant_increments_are_degenerate():
    fit = increment_tail_fit([(1, 1)] * 200, which="H")
    assert fit.degenerate
    assert fit.survival == [(1, 1.0)]
    assert fit.rate is None


def test_tail_fit_input_checks():
    with pytest.raises(InsufficientDataError):
        increment_tail_fit([(1, 1)] * 99)
    with pytest.raises(ValueError):
        increment_tail_fit([(1, 1)] * 200, which="both")


def test_lemma_check_on_unit_heights():
    rows = lemma_tail_check([(3, 1)] * 100)
    assert [r.k for r in rows] == [1, 2, 3, 4, 5]
    assert all(r.p_hat == 0.0 and r.ok for r in rows)


def test_lemma_check_flags_heavy_heights():
    rows = lemma_tail_check([(3, 1), (3, 3)] * 200)
    assert not rows[0].ok
    assert rows[0].p_hat == 0.5


def test_lemma_check_runs_only_for_wide_linear_trees():
    pairs = [(2, 1)] * 150 + [(4, 2)] * 50
    wide = increment_tail_fit(pairs, "H", config=WalkConfig(70, Scheme.linear(2), 10))
    narrow = increment_tail_fit(pairs, "H", config=WalkConfig(2, Scheme.linear(2), 10))
    assert len(wide.lemma_rows) == 5
    assert wide.lemma_violation
    assert narrow.lemma_rows == []


@pytest.mark.slow
def test_once_reinforced_durations_have_no_heavy_tail():
    config = WalkConfig(2, Scheme.once(2), 3000, seed=23)
    outcomes = simulate(config, 8, margin=default_margin(2, 2), runner=SerialRunner())
    pairs = [pair for o in outcomes for pair in o.pairs]
    fit = increment_tail_fit(pairs, "delta_t", config=config)
    assert not fit.degenerate
    assert fit.rate > 0
    assert not fit.positive_curvature
