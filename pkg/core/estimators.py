"""
Estimators module for reinforced tree walks.
Turns replicated walks into speed estimates, regeneration moments, upper and
lower tail probabilities (plain and importance sampled), rate curves and a
polynomial-vs-exponential decay classification.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Protocol, Sequence

import numpy as np

from adapters.replicas import ReplicaRunner, get_runner
from core.regeneration import Pair, TruncationParams, default_margin, filter_short_tight, regenerate
from core.walk import SchemeKind, WalkConfig, run

logger = logging.getLogger(__name__)

TILT_GRID = (0.0, 0.25, 0.5, 1.0)
MIN_RATIO_PAIRS = 30
MIN_TAIL_FIT_PAIRS = 100
MIN_ESS = 10.0
MIN_RATE_POINTS = 4
AIC_GAP_THRESHOLD = 2.0
# Decay-fit weights p/stderr are capped here, so points known to within 25% count equally.
MAX_FIT_WEIGHT = 4.0
LEMMA_TAIL_BASE = 0.115
BOOTSTRAP_ROUNDS = 2000

# Replica ids for tilt pilots start here so they never overlap the main run.
PILOT_REPLICA_OFFSET = 1 << 32


class InsufficientDataError(Exception):
    """Too few replicas, pairs or points for the requested estimate."""

    pass


class SpeedMethod(Enum):
    DIRECT = "direct"
    RATIO = "ratio"


class TailMethod(Enum):
    NAIVE = "naive"
    TILTED = "tilted"
    EXACT = "exact"


class Decay(Enum):
    POLYNOMIAL = "polynomial"
    EXPONENTIAL = "exponential"
    INCONCLUSIVE = "inconclusive"


class _HasEndpoint(Protocol):
    final_height: int
    horizon: int


@dataclass
class SpeedEstimate:
    """Estimate of the almost-sure speed lim h(X_n)/n."""

    estimate: float
    stderr: float
    method: SpeedMethod
    replicas: int
    horizon: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate,
            "stderr": self.stderr,
            "method": self.method.value,
            "replicas": self.replicas,
            "horizon": self.horizon,
        }


@dataclass
class RegenMoments:
    """Means and (co)variances of regeneration increments, plus their truncated versions."""

    A_hat: float
    B_hat: float
    var_A: float
    var_B: float
    cov_AB: float
    m: int
    A_trunc: Optional[float] = None
    B_trunc: Optional[float] = None
    m_trunc: int = 0

    def to_dict(self) -> dict:
        return {
            "A_hat": self.A_hat,
            "B_hat": self.B_hat,
            "var_A": self.var_A,
            "var_B": self.var_B,
            "cov_AB": self.cov_AB,
            "m": self.m,
            "A_trunc": self.A_trunc,
            "B_trunc": self.B_trunc,
            "m_trunc": self.m_trunc,
        }


@dataclass
class TailEstimate:
    """One tail-probability point."""

    n: int
    threshold: float
    p_hat: float
    stderr: float
    method: TailMethod
    replicas: int = 0
    tilt: float = 0.0
    ess: Optional[float] = None
    hits: int = 0
    zero_hit: bool = False
    degenerate_ess: bool = False

    @property
    def usable(self) -> bool:
        """True if log p_hat is a measured value rather than a bound."""
        return self.p_hat > 0 and not self.zero_hit

    def to_row(self) -> dict:
        return {
            "n": self.n,
            "threshold": self.threshold,
            "p_hat": self.p_hat,
            "stderr": self.stderr,
            "method": self.method.value,
            "replicas": self.replicas,
            "tilt": self.tilt,
            "ess": self.ess,
            "zero_hit": self.zero_hit,
        }


@dataclass
class RatePoint:
    n: int
    rate: float
    ci_lo: float
    ci_hi: float


@dataclass
class RateCurve:
    """-(1/n) log p_hat(n) over an n-grid, with a plateau fit over the largest third."""

    points: list[RatePoint]
    plateau: Optional[float] = None
    plateau_ci: Optional[tuple[float, float]] = None
    spread: Optional[tuple[float, float]] = None
    too_few_points: bool = False

    def to_dict(self) -> dict:
        return {
            "points": [vars(p) for p in self.points],
            "plateau": self.plateau,
            "plateau_ci": list(self.plateau_ci) if self.plateau_ci else None,
            "spread": list(self.spread) if self.spread else None,
            "too_few_points": self.too_few_points,
        }


@dataclass
class AuditRow:
    n: int
    m: int
    lhs: float
    rhs: float
    ok: bool


@dataclass
class DecayReport:
    """Outcome of fitting log p against log n and against n."""

    decay: Decay
    poly_slope: float
    poly_slope_se: float
    poly_r2: float
    exp_rate: float
    exp_rate_se: float
    exp_r2: float
    aic_gap: float
    points_used: int
    excluded: int

    def to_dict(self) -> dict:
        out = dict(vars(self))
        out["decay"] = self.decay.value
        return out


@dataclass
class LemmaRow:
    k: int
    p_hat: float
    stderr: float
    bound: float
    ok: bool


@dataclass
class TailFit:
    """Log-linear fit to an empirical survival function."""

    which: str
    m: int
    survival: list[tuple[int, float]]
    rate: Optional[float] = None
    rate_ci: Optional[tuple[float, float]] = None
    curvature: Optional[float] = None
    positive_curvature: bool = False
    degenerate: bool = False
    lemma_rows: list[LemmaRow] = field(default_factory=list)
    lemma_violation: bool = False

    def to_dict(self) -> dict:
        return {
            "which": self.which,
            "m": self.m,
            "rate": self.rate,
            "rate_ci": list(self.rate_ci) if self.rate_ci else None,
            "curvature": self.curvature,
            "positive_curvature": self.positive_curvature,
            "degenerate": self.degenerate,
            "lemma_rows": [vars(r) for r in self.lemma_rows],
            "lemma_violation": self.lemma_violation,
        }


@dataclass
class ReplicaOutcome:
    """What an estimator keeps from one simulated replica."""

    replica: int
    horizon: int
    final_height: int
    log_lr: float = 0.0
    h_n: int = 0
    pairs: list[Pair] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Replica farm
# ---------------------------------------------------------------------------


def _simulate_replica(task: tuple[WalkConfig, float, Optional[int]]) -> ReplicaOutcome:
    config, tilt, margin = task
    trace = run(config, tilt=tilt)
    outcome = ReplicaOutcome(config.replica, trace.horizon, trace.final_height, trace.log_likelihood_ratio)
    if margin is not None:
        summary = regenerate(trace, TruncationParams(margin=margin), skip_initial=False)
        outcome.h_n = summary.h_n
        outcome.pairs = summary.pairs[1:]
    return outcome


def simulate(
    config: WalkConfig,
    replicas: int,
    n: Optional[int] = None,
    tilt: float = 0.0,
    margin: Optional[int] = None,
    runner: Optional[ReplicaRunner] = None,
    first_replica: int = 0,
) -> list[ReplicaOutcome]:
    """
    Run independent replicas of a walk.

    Args:
        config: Walk template; its replica field is replaced by the replica id
        replicas: Number of replicas
        n: Horizon override
        tilt: Proposal tilt on child edges
        margin: If given, regeneration increments are extracted with this censoring margin
        runner: Execution backend (defaults to get_runner())
        first_replica: Id of the first replica

    Returns:
        Outcomes ordered by replica id
    """
    template = config if n is None else config.with_horizon(n)
    runner = runner or get_runner()
    tasks = [(template.with_replica(first_replica + i), tilt, margin) for i in range(replicas)]
    logger.debug(f"Dispatching {replicas} replicas of {template.scheme.label()} b={template.b} n={template.horizon}")
    return runner.map(_simulate_replica, tasks, desc=f"n={template.horizon}")


# ---------------------------------------------------------------------------
# Speed
# ---------------------------------------------------------------------------


def speed_direct(traces: Sequence[_HasEndpoint]) -> SpeedEstimate:
    """
    Mean and standard error of h(X_n)/n across replicas.

    Raises:
        InsufficientDataError: With fewer than 2 replicas
    """
    if len(traces) < 2:
        raise InsufficientDataError(f"speed_direct needs at least 2 replicas, got {len(traces)}")
    horizons = {t.horizon for t in traces}
    if len(horizons) != 1:
        raise ValueError(f"replicas must share a horizon, got {sorted(horizons)}")
    horizon = horizons.pop()
    if horizon < 1:
        raise ValueError("speed needs a horizon of at least one step")
    speeds = [t.final_height / horizon for t in traces]
    r = len(speeds)
    mean = math.fsum(speeds) / r
    var = math.fsum((s - mean) ** 2 for s in speeds) / (r - 1)
    return SpeedEstimate(mean, math.sqrt(var / r), SpeedMethod.DIRECT, r, horizon)


def regen_moments(pairs: Sequence[Pair], params: Optional[TruncationParams] = None) -> RegenMoments:
    """
    Sample moments of (delta_t, H): A_hat, B_hat and, with params, A(N,M), B(N,M).

    Raises:
        InsufficientDataError: With fewer than 2 pairs
    """
    if len(pairs) < 2:
        raise InsufficientDataError(f"regeneration moments need at least 2 pairs, got {len(pairs)}")
    arr = np.asarray(pairs, dtype=np.float64)
    cov = np.cov(arr[:, 0], arr[:, 1], ddof=1)
    moments = RegenMoments(
        A_hat=math.fsum(arr[:, 0]) / len(arr),
        B_hat=math.fsum(arr[:, 1]) / len(arr),
        var_A=float(cov[0, 0]),
        var_B=float(cov[1, 1]),
        cov_AB=float(cov[0, 1]),
        m=len(arr),
    )
    if params is not None:
        kept = filter_short_tight(pairs, params).pairs
        if kept:
            moments.A_trunc = math.fsum(dt for dt, _ in kept) / len(kept)
            moments.B_trunc = math.fsum(h for _, h in kept) / len(kept)
            moments.m_trunc = len(kept)
    return moments


def speed_ratio(pairs: Sequence[Pair]) -> SpeedEstimate:
    """
    B_hat / A_hat with a delta-method standard error.

    Raises:
        InsufficientDataError: With fewer than 30 pairs
    """
    if len(pairs) < MIN_RATIO_PAIRS:
        raise InsufficientDataError(f"speed_ratio needs at least {MIN_RATIO_PAIRS} pairs, got {len(pairs)}")
    mom = regen_moments(pairs)
    ratio = mom.B_hat / mom.A_hat
    var = (mom.var_B - 2 * ratio * mom.cov_AB + ratio**2 * mom.var_A) / (mom.A_hat**2 * mom.m)
    return SpeedEstimate(ratio, math.sqrt(max(var, 0.0)), SpeedMethod.RATIO, mom.m)


# ---------------------------------------------------------------------------
# Tails
# ---------------------------------------------------------------------------


def _trivial(n: int, threshold: float, p: float) -> TailEstimate:
    return TailEstimate(n, threshold, p, 0.0, TailMethod.EXACT)


def tail_from_outcomes(
    outcomes: Sequence[ReplicaOutcome],
    threshold: float,
    upper: bool = True,
    statistic: str = "endpoint",
) -> TailEstimate:
    """
    Naive frequency estimate from an existing replica set.

    Zero hits are reported with the rule-of-three bound 3/replicas and zero_hit set.
    """
    r = len(outcomes)
    if r == 0:
        raise InsufficientDataError("no replicas to estimate from")
    n = outcomes[0].horizon
    values = [o.final_height if statistic == "endpoint" else o.h_n for o in outcomes]
    hits = sum(1 for v in values if (v >= threshold if upper else v <= threshold))
    p = hits / r
    if hits == 0:
        logger.warning(f"No replica hit the {'upper' if upper else 'lower'} event at n={n}, threshold={threshold:g}")
        return TailEstimate(n, threshold, 3.0 / r, 0.0, TailMethod.NAIVE, r, hits=0, zero_hit=True)
    return TailEstimate(n, threshold, p, math.sqrt(p * (1 - p) / r), TailMethod.NAIVE, r, hits=hits)


def upper_lattice_threshold(x: float, n: int) -> int:
    """Smallest height >= x that h(X_n) can take (heights after n steps share the parity of n)."""
    t = math.ceil(x - 1e-9)
    return t + 1 if (t - n) % 2 else t


def lower_lattice_level(x: float, n: int) -> int:
    """Largest height <= x that h(X_n) can take."""
    t = math.floor(x + 1e-9)
    return t - 1 if (n - t) % 2 else t


def _upper_threshold(speed: float, epsilon: float, n: int) -> float:
    if not 0 <= speed <= 1:
        raise ValueError(f"speed must lie in [0, 1], got {speed}")
    if speed + epsilon > 1:
        raise ValueError(f"epsilon={epsilon} exceeds 1 - speed={1 - speed}")
    return (speed + epsilon) * n


def tail_upper(
    config: WalkConfig,
    epsilon: float,
    n: int,
    replicas: int,
    speed: float,
    event: str = "endpoint",
    margin: Optional[int] = None,
    runner: Optional[ReplicaRunner] = None,
) -> TailEstimate:
    """
    Naive Monte Carlo estimate of P(h(X_n) >= (speed + epsilon) n).

    The endpoint threshold is rounded up to the parity lattice of n; h_n may
    take any integer, so the regen threshold is rounded up to an integer.

    Args:
        config: Walk template
        epsilon: Deviation above the speed
        n: Horizon
        replicas: Number of replicas
        speed: Previously estimated speed (T or S)
        event: "endpoint" for h(X_n), "regen" for h_n, the height of the last confirmed cut time by n
        margin: Censoring margin for the regen event (defaults to default_margin(b, c))
        runner: Execution backend
    """
    if event not in ("endpoint", "regen"):
        raise ValueError(f"event must be 'endpoint' or 'regen', got {event!r}")
    x = _upper_threshold(speed, epsilon, n)
    if x <= 0:
        return _trivial(n, x, 1.0)
    if event == "regen":
        margin = default_margin(config.b, config.scheme.c) if margin is None else margin
        threshold = math.ceil(x - 1e-9)
    else:
        margin = None
        threshold = upper_lattice_threshold(x, n)
    outcomes = simulate(config, replicas, n=n, margin=margin, runner=runner)
    return tail_from_outcomes(outcomes, threshold, upper=True, statistic=event)


def tilted_from_outcomes(outcomes: Sequence[ReplicaOutcome], threshold: float, upper: bool, tilt: float) -> TailEstimate:
    """Importance-sampled estimate: mean of indicator times likelihood ratio."""
    r = len(outcomes)
    if r < 2:
        raise InsufficientDataError(f"tilted estimation needs at least 2 replicas, got {r}")
    n = outcomes[0].horizon
    weights = np.array(
        [
            math.exp(o.log_lr) if (o.final_height >= threshold if upper else o.final_height <= threshold) else 0.0
            for o in outcomes
        ]
    )
    hits = int(np.count_nonzero(weights))
    p = math.fsum(weights) / r
    stderr = float(np.std(weights, ddof=1)) / math.sqrt(r)
    sq = math.fsum(weights**2)
    ess = math.fsum(weights) ** 2 / sq if sq > 0 else 0.0
    est = TailEstimate(n, threshold, p, stderr, TailMethod.TILTED, r, tilt, ess, hits)
    if ess < MIN_ESS:
        est.degenerate_ess = True
        logger.warning(f"Degenerate importance weights at n={n}, tilt={tilt}: ESS={ess:.1f}")
    return est


def tail_upper_tilted(
    config: WalkConfig,
    epsilon: float,
    n: int,
    replicas: int,
    tilt: float,
    speed: float,
    runner: Optional[ReplicaRunner] = None,
) -> TailEstimate:
    """
    Importance-sampled estimate of P(h(X_n) >= (speed + epsilon) n).

    Each replica runs under the proposal that multiplies child-edge weights by
    exp(tilt) and carries its exact likelihood ratio.
    """
    if tilt < 0:
        raise ValueError(f"upper-tail tilt must be >= 0, got {tilt}")
    x = _upper_threshold(speed, epsilon, n)
    if x <= 0:
        return _trivial(n, x, 1.0)
    threshold = upper_lattice_threshold(x, n)
    outcomes = simulate(config, replicas, n=n, tilt=tilt, runner=runner)
    return tilted_from_outcomes(outcomes, threshold, upper=True, tilt=tilt)


def tail_lower(
    config: WalkConfig,
    level: float,
    n: int,
    replicas: int,
    runner: Optional[ReplicaRunner] = None,
) -> TailEstimate:
    """Naive Monte Carlo estimate of P(h(X_n) <= level)."""
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    if level >= n:
        return _trivial(n, level, 1.0)
    level = lower_lattice_level(level, n)
    if level < 0:
        return _trivial(n, level, 0.0)
    outcomes = simulate(config, replicas, n=n, runner=runner)
    return tail_from_outcomes(outcomes, level, upper=False)


def tail_lower_tilted(
    config: WalkConfig,
    level: float,
    n: int,
    replicas: int,
    tilt: float,
    runner: Optional[ReplicaRunner] = None,
) -> TailEstimate:
    """Importance-sampled estimate of P(h(X_n) <= level) with a backward-biased proposal (tilt <= 0)."""
    if tilt > 0:
        raise ValueError(f"lower-tail tilt must be <= 0, got {tilt}")
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    if level >= n:
        return _trivial(n, level, 1.0)
    level = lower_lattice_level(level, n)
    if level < 0:
        return _trivial(n, level, 0.0)
    outcomes = simulate(config, replicas, n=n, tilt=tilt, runner=runner)
    return tilted_from_outcomes(outcomes, level, upper=False, tilt=tilt)


def choose_tilt(
    config: WalkConfig,
    n: int,
    threshold: float,
    upper: bool = True,
    pilot_replicas: int = 200,
    grid: Sequence[float] = TILT_GRID,
    runner: Optional[ReplicaRunner] = None,
) -> tuple[float, dict[float, float]]:
    """
    Pick the tilt with the largest effective sample size per unit cost from a fixed grid.

    Lower tails use the negated grid. Pilot replicas use ids disjoint from the main run.

    Returns:
        (chosen tilt, {tilt: ESS per replica-step})
    """
    table: dict[float, float] = {}
    for magnitude in grid:
        tilt = magnitude if upper else -magnitude
        outcomes = simulate(
            config, pilot_replicas, n=n, tilt=tilt, runner=runner, first_replica=PILOT_REPLICA_OFFSET
        )
        est = tilted_from_outcomes(outcomes, threshold, upper, tilt)
        table[tilt] = (est.ess or 0.0) / (pilot_replicas * n)
    best = max(table, key=lambda t: (table[t], -abs(t)))
    logger.info(f"Chose tilt {best} at n={n} (ESS per step: {table})")
    return best, table


# ---------------------------------------------------------------------------
# Rates and decay
# ---------------------------------------------------------------------------


def rate_curve(estimates: Sequence[TailEstimate], seed: int = 0) -> RateCurve:
    """
    Points (n, -log p_hat / n) and a plateau fit over the largest-n third.

    The plateau CI is a parametric bootstrap that redraws each p_hat from a
    normal with its standard error. Zero-hit and nonpositive points are skipped.
    """
    usable = sorted((e for e in estimates if e.usable), key=lambda e: e.n)
    points = []
    for e in usable:
        rate = -math.log(e.p_hat) / e.n
        half = 1.96 * e.stderr / (e.p_hat * e.n)
        points.append(RatePoint(e.n, rate, rate - half, rate + half))
    curve = RateCurve(points)
    if len(points) < MIN_RATE_POINTS:
        logger.warning(f"Rate curve has {len(points)} usable points; at least {MIN_RATE_POINTS} are needed for a plateau")
        curve.too_few_points = True
        return curve

    top = usable[-max(1, math.ceil(len(usable) / 3)) :]
    rates = np.array([-math.log(e.p_hat) / e.n for e in top])
    curve.plateau = float(rates.mean())
    curve.spread = (float(rates.min()), float(rates.max()))

    p = np.array([e.p_hat for e in top])
    se = np.array([e.stderr for e in top])
    ns = np.array([e.n for e in top], dtype=np.float64)
    rng = np.random.default_rng(seed)
    draws = p + se * rng.standard_normal((BOOTSTRAP_ROUNDS, len(top)))
    draws = np.clip(draws, np.finfo(float).tiny, 1.0)
    boot = (-np.log(draws) / ns).mean(axis=1)
    lo, hi = np.percentile(boot, [2.5, 97.5])
    curve.plateau_ci = (float(lo), float(hi))
    return curve


def subadditivity_audit(estimates: Sequence[TailEstimate], N: int, b: int) -> list[AuditRow]:
    """
    Check a_{n+m+1} <= a_n + a_m + log n + N log 2 + log(b + 1) + 3 * (MC error) on the grid.

    a_n = -log p_hat(n). Every ordered (n, m) with n, m and n+m+1 all usable is checked.
    """
    by_n = {e.n: e for e in estimates if e.usable}
    rows = []
    for n in sorted(by_n):
        for m in sorted(by_n):
            target = by_n.get(n + m + 1)
            if target is None:
                continue
            a = {k: -math.log(e.p_hat) for k, e in ((n, by_n[n]), (m, by_n[m]), (n + m + 1, target))}
            err = math.sqrt(sum((e.stderr / e.p_hat) ** 2 for e in (by_n[n], by_n[m], target)))
            rhs = a[n] + a[m] + math.log(n) + N * math.log(2) + math.log(b + 1) + 3 * err
            lhs = a[n + m + 1]
            rows.append(AuditRow(n, m, lhs, rhs, lhs <= rhs))
    return rows


def _wls(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[float, float, float, float]:
    """Weighted straight-line fit; returns (slope, slope se, weighted RSS, weighted R^2)."""
    (slope, intercept), cov = np.polyfit(x, y, 1, w=w, cov=True)
    resid = w * (y - (slope * x + intercept))
    rss = float(np.dot(resid, resid))
    ybar = np.average(y, weights=w**2)
    tss = float(np.sum((w * (y - ybar)) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else 1.0
    return float(slope), float(math.sqrt(max(cov[0, 0], 0.0))), rss, r2


def decay_classify(points: Sequence[tuple[float, float, float]]) -> DecayReport:
    """
    Decide whether p(n) decays like a power of n or exponentially in n.

    Fits log p against log n and log p against n by weighted least squares and
    compares the fits by AIC. Weights are p / stderr capped at MAX_FIT_WEIGHT
    (equal weights if no stderr is known), so tight early points cannot outvote
    the large-n points that separate the two shapes. The better model wins when the gap exceeds 2; if neither slope
    is two standard errors away from zero the verdict is Inconclusive.

    Args:
        points: (n, p_hat, stderr) triples

    Raises:
        InsufficientDataError: Fewer than 5 positive points, or n spans less than a factor of 4
    """
    kept = [(n, p, se) for n, p, se in points if p > 0]
    excluded = len(points) - len(kept)
    if not kept:
        raise InsufficientDataError("every point has a nonpositive p_hat")
    if len(kept) < 5:
        raise InsufficientDataError(f"decay classification needs at least 5 points, got {len(kept)}")
    ns = np.array([k[0] for k in kept], dtype=np.float64)
    if ns.max() < 4 * ns.min():
        raise InsufficientDataError(f"n must span at least a factor of 4, got {ns.min():g}..{ns.max():g}")

    p = np.array([k[1] for k in kept])
    se = np.array([k[2] for k in kept])
    y = np.log(p)
    if np.all(se > 0):
        w = np.minimum(p / se, MAX_FIT_WEIGHT)
    else:
        w = np.ones_like(p)

    poly_slope, poly_se, poly_rss, poly_r2 = _wls(np.log(ns), y, w)
    exp_slope, exp_se, exp_rss, exp_r2 = _wls(ns, y, w)

    m = len(kept)
    floor = 1e-12 * m
    if poly_rss <= floor and exp_rss <= floor:
        gap = 0.0
    else:
        gap = m * (math.log(max(poly_rss, floor)) - math.log(max(exp_rss, floor)))

    flat = abs(poly_slope) <= 2 * poly_se and abs(exp_slope) <= 2 * exp_se
    if flat or abs(gap) <= AIC_GAP_THRESHOLD:
        decay = Decay.INCONCLUSIVE
    elif gap > 0:
        decay = Decay.EXPONENTIAL
    else:
        decay = Decay.POLYNOMIAL

    return DecayReport(
        decay=decay,
        poly_slope=poly_slope,
        poly_slope_se=poly_se,
        poly_r2=poly_r2,
        exp_rate=-exp_slope,
        exp_rate_se=exp_se,
        exp_r2=exp_r2,
        aic_gap=gap,
        points_used=m,
        excluded=excluded,
    )


# ---------------------------------------------------------------------------
# Increment tails
# ---------------------------------------------------------------------------


def lemma_tail_check(pairs: Sequence[Pair], base: float = LEMMA_TAIL_BASE, k_max: int = 5) -> list[LemmaRow]:
    """
    Compare P(H - 1 >= k) with base**k for k = 1..k_max.

    H >= 1 always, so the bound is checked on the excess height over one level.
    """
    if not pairs:
        raise InsufficientDataError("no increments to check")
    excess = np.array([h for _, h in pairs]) - 1
    m = excess.size
    rows = []
    for k in range(1, k_max + 1):
        p = float(np.count_nonzero(excess >= k)) / m
        se = math.sqrt(p * (1 - p) / m)
        bound = base**k
        rows.append(LemmaRow(k, p, se, bound, p <= bound + 3 * se))
    return rows


def _survival(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Support 1..max and counts of values >= k."""
    counts = np.bincount(values)
    at_least = counts[::-1].cumsum()[::-1]
    ks = np.arange(1, values.max() + 1)
    return ks, at_least[1:]


def _fit_log_survival(values: np.ndarray, min_count: int) -> Optional[tuple[float, Optional[float], Optional[float]]]:
    ks, counts = _survival(values)
    keep = counts >= min_count
    if np.count_nonzero(keep) < 3:
        return None
    x = ks[keep].astype(np.float64)
    y = np.log(counts[keep] / values.size)
    w = np.sqrt(counts[keep])
    slope = float(np.polyfit(x, y, 1, w=w)[0])
    curvature = curvature_se = None
    if x.size >= 5:
        coef, cov = np.polyfit(x, y, 2, w=w, cov=True)
        curvature, curvature_se = float(coef[0]), float(math.sqrt(max(cov[0, 0], 0.0)))
    return -slope, curvature, curvature_se


def increment_tail_fit(
    pairs: Sequence[Pair],
    which: str = "delta_t",
    config: Optional[WalkConfig] = None,
    min_count: int = 5,
    bootstrap: int = 200,
    seed: int = 0,
) -> TailFit:
    """
    Exponential-tail fit of the empirical survival function of delta_t or H.

    The rate is the negated slope of log P(X >= k) against k, fitted over every
    k with at least min_count observations; its CI is a percentile bootstrap over
    pairs. For the linear model with c = 2 and b >= 70 the H fit also runs the
    0.115**k tail check and flags any violation.

    Raises:
        InsufficientDataError: With fewer than 100 pairs
    """
    if which not in ("delta_t", "H"):
        raise ValueError(f"which must be 'delta_t' or 'H', got {which!r}")
    if len(pairs) < MIN_TAIL_FIT_PAIRS:
        raise InsufficientDataError(f"tail fit needs at least {MIN_TAIL_FIT_PAIRS} pairs, got {len(pairs)}")
    column = 0 if which == "delta_t" else 1
    values = np.array([pair[column] for pair in pairs], dtype=np.int64)
    ks, counts = _survival(values)
    fit = TailFit(which, values.size, [(int(k), float(c) / values.size) for k, c in zip(ks, counts)])

    main = _fit_log_survival(values, min_count)
    if main is None:
        fit.degenerate = True
        logger.warning(f"Survival of {which} has fewer than 3 populated points; tail fit is degenerate")
    else:
        fit.rate, fit.curvature, curvature_se = main
        if fit.curvature is not None and curvature_se is not None:
            fit.positive_curvature = fit.curvature > 3 * curvature_se
        rng = np.random.default_rng(seed)
        boot = []
        for _ in range(bootstrap):
            again = _fit_log_survival(rng.choice(values, size=values.size, replace=True), min_count)
            if again is not None:
                boot.append(again[0])
        if boot:
            lo, hi = np.percentile(boot, [2.5, 97.5])
            fit.rate_ci = (float(lo), float(hi))

    if (
        which == "H"
        and config is not None
        and config.scheme.kind is SchemeKind.LINEAR
        and config.scheme.c == 2
        and config.b >= 70
    ):
        fit.lemma_rows = lemma_tail_check(pairs)
        fit.lemma_violation = not all(row.ok for row in fit.lemma_rows)
        if fit.lemma_violation:
            logger.warning("Empirical increment heights exceed the 0.115^k tail bound")
    return fit
