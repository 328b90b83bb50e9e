"""
Oracle module for reinforced tree walks.
Exact law of short walks by weighted path enumeration, collapsing states that
differ only by a relabeling of children.
"""

import logging
import os
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Union

import numpy as np

from core.walk import ResourceLimitError, Scheme, SchemeKind, WalkConfig

logger = logging.getLogger(__name__)

# Float mode accumulates in extended precision (80-bit on x86).
Number = Union[Fraction, np.longdouble]
HeightPredicate = Callable[[tuple[int, ...]], bool]

# Largest denominator for which c is treated as an exact rational.
MAX_DENOMINATOR = 1000
UNCOLLAPSED_NMAX = 6


def get_oracle_nmax() -> int:
    """Get the default enumeration cap from env or default."""
    return int(os.environ.get("RTREE_ORACLE_NMAX", "8"))


def exact_c(c: float) -> Optional[Fraction]:
    """c as a small-denominator Fraction, or None if it is not one."""
    frac = Fraction(c).limit_denominator(MAX_DENOMINATOR)
    return frac if abs(float(frac) - c) < 1e-12 else None


def _weight_fn(scheme: Scheme, exact: bool) -> Callable[[int], Number]:
    one: Number = Fraction(1) if exact else np.longdouble(1)
    c: Number = exact_c(scheme.c) if exact else np.longdouble(scheme.c)
    step = c - one

    if scheme.kind is SchemeKind.LINEAR:
        return lambda k: one + k * step
    if scheme.kind is SchemeKind.ONCE:
        return lambda k: one if k == 0 else c
    k_max = scheme.k_max
    return lambda k: one + min(k, k_max) * step


@dataclass
class ExactDistribution:
    """Exact law of h(X_n) as a probability vector over 0..n."""

    probs: list[Number]
    exact: bool

    def __len__(self) -> int:
        return len(self.probs)

    def __getitem__(self, height: int) -> Number:
        return self.probs[height]

    @property
    def n(self) -> int:
        return len(self.probs) - 1

    def at_least(self, threshold: float) -> Number:
        return sum((p for h, p in enumerate(self.probs) if h >= threshold), self._zero())

    def at_most(self, level: float) -> Number:
        return sum((p for h, p in enumerate(self.probs) if h <= level), self._zero())

    def as_floats(self) -> list[float]:
        return [float(p) for p in self.probs]

    def _zero(self) -> Number:
        return Fraction(0) if self.exact else np.longdouble(0)


class _Shape:
    """
    Visited subtree with children labeled in creation order.

    counts maps a label path to the traversal count of the edge above it;
    kids maps a label path to how many of its children have been visited.
    """

    __slots__ = ("counts", "kids", "current")

    def __init__(self, counts: dict, kids: dict, current: tuple):
        self.counts = counts
        self.kids = kids
        self.current = current

    @classmethod
    def root(cls) -> "_Shape":
        return cls({}, {(): 0}, ())

    def key(self) -> tuple:
        return self._encode(())

    def _encode(self, path: tuple) -> tuple:
        children = sorted(
            (self.counts[path + (i,)], self._encode(path + (i,))) for i in range(self.kids[path])
        )
        return (path == self.current, tuple(children))

    def moves(self, b: int, weight: Callable[[int], Number]) -> list[tuple["_Shape", Number]]:
        """Successor shapes with their unnormalized weights; fresh children collapse into one move."""
        here = self.current
        visited = self.kids[here]
        out = []
        if here:
            out.append((self._moved(here, here[:-1]), weight(self.counts[here])))
        for i in range(visited):
            child = here + (i,)
            out.append((self._moved(child, child), weight(self.counts[child])))
        if visited < b:
            child = here + (visited,)
            shape = self._moved(child, child, fresh=True)
            out.append((shape, (b - visited) * weight(0)))
        return out

    def _moved(self, edge: tuple, target: tuple, fresh: bool = False) -> "_Shape":
        counts = dict(self.counts)
        kids = self.kids
        if fresh:
            kids = dict(kids)
            kids[edge[:-1]] += 1
            kids[edge] = 0
            counts[edge] = 0
        counts[edge] += 1
        return _Shape(counts, kids, target)


def _extended_sum(values: list) -> np.longdouble:
    """Sum smallest first in extended precision."""
    return sum(sorted(values), np.longdouble(0))


def _check_horizon(n: int, n_max: int) -> None:
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if n > n_max:
        raise ResourceLimitError(f"exact enumeration refuses n={n} above n_max={n_max}")


def _enumerate(
    config: WalkConfig,
    n: int,
    track_path: bool,
    exact: Optional[bool],
    n_max: Optional[int],
) -> tuple[dict, bool]:
    """Collapsed forward enumeration; returns {key: (shape, heights, prob)} after n steps."""
    n_max = get_oracle_nmax() if n_max is None else n_max
    _check_horizon(n, n_max)
    use_exact = exact_c(config.scheme.c) is not None if exact is None else exact
    if use_exact and exact_c(config.scheme.c) is None:
        raise ValueError(f"c={config.scheme.c} is not a small-denominator rational")
    weight = _weight_fn(config.scheme, use_exact)
    one: Number = Fraction(1) if use_exact else np.longdouble(1)

    start = _Shape.root()
    layer = {(start.key(), (0,) if track_path else ()): (start, (0,), one)}
    for _ in range(n):
        nxt: dict = {}
        for shape, heights, prob in layer.values():
            moves = shape.moves(config.b, weight)
            total = sum(w for _, w in moves)
            for succ, w in moves:
                succ_heights = heights + (len(succ.current),) if track_path else (len(succ.current),)
                key = (succ.key(), succ_heights if track_path else ())
                p = prob * w / total
                if key in nxt:
                    rep, hs, acc = nxt[key]
                    nxt[key] = (rep, hs, acc + p)
                else:
                    nxt[key] = (succ, succ_heights, p)
        layer = nxt
    logger.debug(f"Enumerated {len(layer)} collapsed states at n={n} for {config.scheme.label()} b={config.b}")
    return layer, use_exact


def exact_distribution(
    config: WalkConfig,
    n: Optional[int] = None,
    n_max: Optional[int] = None,
    exact: Optional[bool] = None,
) -> ExactDistribution:
    """
    Exact law of h(X_n).

    Args:
        config: Tree and scheme (the seed is irrelevant)
        n: Number of steps; defaults to config.horizon
        n_max: Enumeration cap; defaults to RTREE_ORACLE_NMAX or 8
        exact: Force rational (True) or float (False) arithmetic; None picks rational when c allows it

    Returns:
        ExactDistribution over heights 0..n

    Raises:
        ResourceLimitError: If n exceeds n_max
    """
    n = config.horizon if n is None else n
    layer, use_exact = _enumerate(config, n, track_path=False, exact=exact, n_max=n_max)
    buckets: list[list[Number]] = [[] for _ in range(n + 1)]
    for shape, _, prob in layer.values():
        buckets[len(shape.current)].append(prob)
    if use_exact:
        probs: list[Number] = [sum(bucket, Fraction(0)) for bucket in buckets]
    else:
        probs = [_extended_sum(bucket) for bucket in buckets]
    return ExactDistribution(probs, use_exact)


def exact_event_prob(
    config: WalkConfig,
    n: int,
    predicate: HeightPredicate,
    n_max: Optional[int] = None,
    exact: Optional[bool] = None,
) -> Number:
    """
    Exact probability that the height path (h(X_0), ..., h(X_n)) satisfies predicate.

    Raises:
        ResourceLimitError: If n exceeds n_max
    """
    layer, use_exact = _enumerate(config, n, track_path=True, exact=exact, n_max=n_max)
    hits = [prob for _, heights, prob in layer.values() if predicate(heights)]
    return sum(hits, Fraction(0)) if use_exact else _extended_sum(hits)


def exact_cut_level_prob(config: WalkConfig, n: int, level: int, n_max: Optional[int] = None) -> Number:
    """Probability that `level` is reached within n steps and visited exactly once."""
    return exact_event_prob(config, n, lambda heights: heights.count(level) == 1, n_max=n_max)


def enumerate_uncollapsed(config: WalkConfig, n: int, exact: Optional[bool] = None) -> ExactDistribution:
    """
    Law of h(X_n) by brute force over every neighbor, with no symmetry collapsing.

    Cost grows like (b+1)^n, so this is capped at n <= 6; it exists to cross-check
    the collapsed enumerator.
    """
    _check_horizon(n, UNCOLLAPSED_NMAX)
    use_exact = exact_c(config.scheme.c) is not None if exact is None else exact
    weight = _weight_fn(config.scheme, use_exact)
    b = config.b
    buckets: list[list[Number]] = [[] for _ in range(n + 1)]

    def walk(counts: dict, current: tuple, prob: Number, steps_left: int) -> None:
        if steps_left == 0:
            buckets[len(current)].append(prob)
            return
        moves = []
        if current:
            moves.append((current, current[:-1]))
        moves.extend((current + (i,), current + (i,)) for i in range(b))
        ws = [weight(counts.get(edge, 0)) for edge, _ in moves]
        total = sum(ws)
        for (edge, target), w in zip(moves, ws):
            counts[edge] = counts.get(edge, 0) + 1
            walk(counts, target, prob * w / total, steps_left - 1)
            counts[edge] -= 1

    walk({}, (), Fraction(1) if use_exact else np.longdouble(1), n)
    if use_exact:
        return ExactDistribution([sum(bucket, Fraction(0)) for bucket in buckets], True)
    return ExactDistribution([_extended_sum(bucket) for bucket in buckets], False)
