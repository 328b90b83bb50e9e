"""
Regeneration module for reinforced tree walks.
Extracts hitting, leaving and cut times from a height path, turns them into
regeneration increments, and checks those increments for i.i.d. behavior.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import stats

from core.walk import TraceSummary

logger = logging.getLogger(__name__)

# Return probability the default censoring margin must push below.
MARGIN_TARGET = 1e-4
MIN_DIAGNOSTIC_PAIRS = 30
AUTOCORR_LAGS = (1, 2, 3, 4, 5)

Pair = tuple[int, int]


@dataclass(frozen=True)
class LevelTimes:
    """First hit and last visit step per level reached within the horizon."""

    first_hit: tuple[int, ...]
    last_visit: tuple[int, ...]
    horizon: int

    @property
    def max_level(self) -> int:
        return len(self.first_hit) - 1

    def is_cut_level(self, level: int) -> bool:
        return self.first_hit[level] == self.last_visit[level]


@dataclass(frozen=True)
class RegenRecord:
    """
    One cut time and the block that follows it.

    next_tau / next_level are None for the last record of a trace, whose block
    is still open at the horizon.
    """

    tau: int
    level: int
    next_tau: Optional[int]
    next_level: Optional[int]
    confirmed: bool

    @property
    def delta_t(self) -> Optional[int]:
        return None if self.next_tau is None else self.next_tau - self.tau

    @property
    def H(self) -> Optional[int]:
        return None if self.next_level is None else self.next_level - self.level


@dataclass(frozen=True)
class TruncationParams:
    """Height cap N, time cap M and the censoring margin."""

    N: float = math.inf
    M: float = math.inf
    margin: int = 0

    def __post_init__(self):
        if self.N < 1 or self.M < 1:
            raise ValueError(f"truncation caps must be >= 1, got N={self.N}, M={self.M}")
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")


@dataclass
class FilterResult:
    """Pairs surviving the N-short / M-tight filter, with bookkeeping."""

    pairs: list[Pair]
    kept: int
    dropped_long: int
    dropped_loose: int

    @property
    def dropped(self) -> int:
        return self.dropped_long + self.dropped_loose


@dataclass
class IIDReport:
    """Empirical independence and stationarity checks on regeneration increments."""

    m: int
    band: float
    autocorr_dt: dict[int, float] = field(default_factory=dict)
    autocorr_h: dict[int, float] = field(default_factory=dict)
    ks_dt: float = 0.0
    ks_dt_pvalue: float = 1.0
    ks_h: float = 0.0
    ks_h_pvalue: float = 1.0
    zero_variance_dt: bool = False
    zero_variance_h: bool = False
    insufficient_data: bool = False

    @property
    def exceedances(self) -> int:
        values = list(self.autocorr_dt.values()) + list(self.autocorr_h.values())
        return sum(1 for r in values if abs(r) > self.band)

    @property
    def allowed_exceedances(self) -> int:
        """Band exceedances an i.i.d. sequence stays within 99% of the time (each band has 5% size)."""
        checks = len(self.autocorr_dt) + len(self.autocorr_h)
        return int(stats.binom.ppf(0.99, checks, 0.05)) if checks else 0

    @property
    def within_bands(self) -> bool:
        if self.insufficient_data and not self.autocorr_dt:
            return False
        return self.exceedances <= self.allowed_exceedances

    def to_dict(self) -> dict:
        return {
            "m": self.m,
            "band": self.band,
            "autocorr_dt": {str(k): v for k, v in self.autocorr_dt.items()},
            "autocorr_h": {str(k): v for k, v in self.autocorr_h.items()},
            "ks_dt": self.ks_dt,
            "ks_dt_pvalue": self.ks_dt_pvalue,
            "ks_h": self.ks_h,
            "ks_h_pvalue": self.ks_h_pvalue,
            "zero_variance_dt": self.zero_variance_dt,
            "zero_variance_h": self.zero_variance_h,
            "insufficient_data": self.insufficient_data,
            "exceedances": self.exceedances,
            "allowed_exceedances": self.allowed_exceedances,
            "within_bands": self.within_bands,
        }


def _heights_of(trace: Union[TraceSummary, Sequence[int], np.ndarray]) -> np.ndarray:
    if isinstance(trace, TraceSummary):
        return trace.heights
    return np.asarray(trace, dtype=np.int64)


def level_times(trace: Union[TraceSummary, Sequence[int], np.ndarray]) -> LevelTimes:
    """
    Hitting times t_k and leaving times rho_k for every level reached.

    A TraceSummary already carries both sequences (maintained online by the walk);
    a bare height sequence is scanned.
    """
    if isinstance(trace, TraceSummary):
        return LevelTimes(tuple(trace.first_visit), tuple(trace.last_visit), trace.horizon)

    heights = _heights_of(trace)
    if heights.size == 0 or heights[0] != 0:
        raise ValueError("a height path must start at 0")
    # unit steps from 0 visit every level in 0..max, so unique() is dense
    _, first = np.unique(heights, return_index=True)
    _, from_end = np.unique(heights[::-1], return_index=True)
    last = heights.size - 1 - from_end
    return LevelTimes(tuple(first.tolist()), tuple(last.tolist()), int(heights.size - 1))


def cut_times(times: LevelTimes, horizon: Optional[int] = None, margin: int = 0) -> list[RegenRecord]:
    """
    Cut times observed within the horizon.

    tau_0 = 0 is always included (level 0, whether or not the root is a cut
    vertex). Any other level k with rho_k == t_k is a cut level. A record is
    confirmed only when its level is at most max_level - margin, i.e. the walk
    has since climbed `margin` levels past it.

    Args:
        times: Level times of one trace
        horizon: Horizon of the trace (defaults to the one stored in times)
        margin: Censoring margin (>= 0)

    Returns:
        Records ordered by tau
    """
    if margin < 0:
        raise ValueError(f"margin must be >= 0, got {margin}")
    horizon = times.horizon if horizon is None else horizon
    ceiling = times.max_level - margin

    cuts = [(0, 0)]
    for level in range(1, times.max_level + 1):
        hit = times.first_hit[level]
        if hit <= horizon and times.is_cut_level(level):
            cuts.append((hit, level))

    records = []
    for i, (tau, level) in enumerate(cuts):
        nxt = cuts[i + 1] if i + 1 < len(cuts) else (None, None)
        records.append(RegenRecord(tau, level, nxt[0], nxt[1], confirmed=level <= ceiling))
    return records


def increments(records: Sequence[RegenRecord], skip_initial: bool = False) -> list[Pair]:
    """
    (delta_t, H) between consecutive confirmed cut times.

    The open block after the last confirmed cut time is censored and never
    appears. With skip_initial the block starting at tau_0 is dropped too.
    """
    confirmed = [r for r in records if r.confirmed]
    pairs = [(b.tau - a.tau, b.level - a.level) for a, b in zip(confirmed, confirmed[1:])]
    if skip_initial and confirmed and confirmed[0].tau == 0 and pairs:
        pairs = pairs[1:]
    return pairs


def filter_short_tight(pairs: Sequence[Pair], params: TruncationParams) -> FilterResult:
    """Keep the pairs with H <= N (N-short) and delta_t <= M (M-tight), in order."""
    kept: list[Pair] = []
    dropped_long = dropped_loose = 0
    for dt, h in pairs:
        if h > params.N:
            dropped_long += 1
        elif dt > params.M:
            dropped_loose += 1
        else:
            kept.append((dt, h))
    return FilterResult(kept, len(kept), dropped_long, dropped_loose)


def truncated_height_sum(pairs: Union[FilterResult, Sequence[Pair]]) -> int:
    """Sum of H over the given pairs; 0 when there are none."""
    if isinstance(pairs, FilterResult):
        pairs = pairs.pairs
    return sum(h for _, h in pairs)


def _autocorr(x: np.ndarray, lags: Sequence[int]) -> tuple[dict[int, float], bool]:
    centered = x - x.mean()
    denom = float(np.dot(centered, centered))
    if denom == 0.0:
        return {lag: 0.0 for lag in lags}, True
    out = {}
    for lag in lags:
        out[lag] = float(np.dot(centered[:-lag], centered[lag:]) / denom) if lag < x.size else 0.0
    return out, False


def _ks_halves(x: np.ndarray, permutations: int, rng: np.random.Generator) -> tuple[float, float]:
    half = x.size // 2
    first, second = x[:half], x[half:]
    if first.size == 0 or second.size == 0:
        return 0.0, 1.0

    def statistic(a, b):
        return stats.ks_2samp(a, b).statistic

    result = stats.permutation_test(
        (first, second),
        statistic,
        permutation_type="independent",
        alternative="greater",
        n_resamples=permutations,
        random_state=rng,
    )
    return float(result.statistic), float(result.pvalue)


def iid_diagnostics(
    pairs: Sequence[Pair],
    permutations: int = 1000,
    seed: int = 0,
) -> IIDReport:
    """
    Check regeneration increments for serial dependence and drift.

    Reports lag 1..5 autocorrelations of delta_t and H against the 95% band
    1.96/sqrt(m), and a two-sample Kolmogorov-Smirnov distance between the first
    and second half of each series with a permutation p-value.

    Args:
        pairs: (delta_t, H) increments, in time order
        permutations: Number of permutations for the p-value
        seed: Seed of the permutation stream

    Returns:
        IIDReport; insufficient_data is set below 30 pairs
    """
    m = len(pairs)
    report = IIDReport(m=m, band=1.96 / math.sqrt(m) if m else math.inf)
    if m < MIN_DIAGNOSTIC_PAIRS:
        logger.warning(f"Only {m} increments; i.i.d. diagnostics need at least {MIN_DIAGNOSTIC_PAIRS}")
        report.insufficient_data = True
        if m < 2:
            return report

    arr = np.asarray(pairs, dtype=np.float64)
    dt, h = arr[:, 0], arr[:, 1]
    report.autocorr_dt, report.zero_variance_dt = _autocorr(dt, AUTOCORR_LAGS)
    report.autocorr_h, report.zero_variance_h = _autocorr(h, AUTOCORR_LAGS)

    rng = np.random.default_rng(seed)
    report.ks_dt, report.ks_dt_pvalue = _ks_halves(dt, permutations, rng)
    report.ks_h, report.ks_h_pvalue = _ks_halves(h, permutations, rng)
    return report


def default_margin(b: int, c: float, target: float = MARGIN_TARGET) -> int:
    """
    Smallest margin whose exponential return-probability bound is below target.

    Stepping back from a freshly entered vertex has probability c / (b + c);
    the bound after climbing k levels is that rate to the power k.
    """
    return_rate = c / (b + c)
    return max(1, math.ceil(math.log(target) / math.log(return_rate)))


@dataclass
class RegenerationSummary:
    """All regeneration quantities of one trace."""

    records: list[RegenRecord]
    pairs: list[Pair]
    h_n: int
    h_n_short: int
    h_n_short_tight: int
    filtered: FilterResult
    margin: int


def regenerate(
    trace: Union[TraceSummary, Sequence[int], np.ndarray],
    params: Optional[TruncationParams] = None,
    skip_initial: bool = False,
) -> RegenerationSummary:
    """Trace -> level times -> cut times -> increments -> truncated height sums."""
    params = params or TruncationParams()
    times = level_times(trace)
    records = cut_times(times, times.horizon, params.margin)
    pairs = increments(records, skip_initial=skip_initial)
    short = filter_short_tight(pairs, TruncationParams(N=params.N))
    short_tight = filter_short_tight(pairs, params)
    return RegenerationSummary(
        records=records,
        pairs=pairs,
        h_n=truncated_height_sum(pairs),
        h_n_short=truncated_height_sum(short),
        h_n_short_tight=truncated_height_sum(short_tight),
        filtered=short_tight,
        margin=params.margin,
    )
