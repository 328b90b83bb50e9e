"""
Walk module for reinforced tree walks.
Simulates one edge-reinforced walk on the infinite b-ary tree, materializing only visited edges.
"""

import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

logger = logging.getLogger(__name__)

# Uniforms are drawn from the generator in blocks of this size.
UNIFORM_BLOCK = 8192


class ResourceLimitError(Exception):
    """A simulation or enumeration exceeded its configured budget."""

    pass


def get_max_edges() -> int:
    """Get the default edge-table budget from env or default."""
    return int(os.environ.get("RTREE_MAX_EDGES", "5000000"))


class SchemeKind(Enum):
    """Supported reinforcement rules."""

    LINEAR = "linear"
    ONCE = "once"
    KTIMES = "ktimes"


@dataclass(frozen=True)
class Scheme:
    """
    A reinforcement rule: how an edge weight grows with its traversal count.

    LINEAR grows by (c - 1) per traversal, ONCE jumps to c on the first traversal,
    KTIMES grows linearly for the first k_max traversals and then stays put.
    """

    kind: SchemeKind = SchemeKind.LINEAR
    c: float = 2.0
    k_max: Optional[int] = None

    def __post_init__(self):
        if self.c < 1:
            raise ValueError(f"reinforcement factor c must be >= 1, got {self.c}")
        if self.kind is SchemeKind.KTIMES:
            if self.k_max is None or self.k_max < 1:
                raise ValueError(f"KTimes scheme needs k_max >= 1, got {self.k_max}")
        elif self.k_max is not None:
            raise ValueError(f"k_max only applies to the KTimes scheme, not {self.kind.value}")

    @classmethod
    def linear(cls, c: float) -> "Scheme":
        return cls(SchemeKind.LINEAR, float(c))

    @classmethod
    def once(cls, c: float) -> "Scheme":
        return cls(SchemeKind.ONCE, float(c))

    @classmethod
    def ktimes(cls, c: float, k_max: int) -> "Scheme":
        return cls(SchemeKind.KTIMES, float(c), int(k_max))

    @property
    def integral(self) -> bool:
        """True when every weight this scheme produces is an integer."""
        return float(self.c).is_integer()

    def weight(self, count: int) -> float:
        return weight_after(self, count)

    def label(self) -> str:
        """Short human-readable label, e.g. 'linear(c=2)' or 'ktimes(c=2,k=3)'."""
        if self.kind is SchemeKind.KTIMES:
            return f"ktimes(c={self.c:g},k={self.k_max})"
        return f"{self.kind.value}(c={self.c:g})"

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "c": self.c, "k_max": self.k_max}

    @classmethod
    def from_dict(cls, data: dict) -> "Scheme":
        k_max = data.get("k_max")
        return cls(SchemeKind(data["kind"]), float(data["c"]), None if k_max is None else int(k_max))


def weight_after(scheme: Scheme, count: int) -> float:
    """
    Weight of an edge that has been traversed `count` times.

    Args:
        scheme: The reinforcement rule
        count: Number of traversals so far (>= 0)

    Returns:
        The edge weight, always >= 1
    """
    if count <= 0:
        return 1.0
    if scheme.kind is SchemeKind.LINEAR:
        return 1.0 + count * (scheme.c - 1.0)
    if scheme.kind is SchemeKind.ONCE:
        return scheme.c
    return 1.0 + min(count, scheme.k_max) * (scheme.c - 1.0)


@dataclass(frozen=True)
class VertexId:
    """A tree vertex named by its child-index path from the root."""

    path: tuple[int, ...] = ()

    @property
    def depth(self) -> int:
        return len(self.path)

    def child(self, index: int) -> "VertexId":
        return VertexId(self.path + (index,))

    def parent(self) -> "VertexId":
        if not self.path:
            raise ValueError("the root has no parent")
        return VertexId(self.path[:-1])


ROOT = VertexId()


@dataclass(frozen=True)
class WalkConfig:
    """Full identity of one simulated walk."""

    b: int
    scheme: Scheme
    horizon: int
    seed: int = 0
    replica: int = 0
    max_edges: int = field(default_factory=get_max_edges)

    def __post_init__(self):
        if self.b < 2:
            raise ValueError(f"branching factor b must be >= 2, got {self.b}")
        if self.horizon < 0:
            raise ValueError(f"horizon must be >= 0, got {self.horizon}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.replica < 0:
            raise ValueError(f"replica index must be >= 0, got {self.replica}")

    def with_replica(self, replica: int) -> "WalkConfig":
        return WalkConfig(self.b, self.scheme, self.horizon, self.seed, replica, self.max_edges)

    def with_horizon(self, horizon: int) -> "WalkConfig":
        return WalkConfig(self.b, self.scheme, horizon, self.seed, self.replica, self.max_edges)

    def to_dict(self) -> dict:
        return {
            "b": self.b,
            "scheme": self.scheme.to_dict(),
            "horizon": self.horizon,
            "seed": self.seed,
            "replica": self.replica,
        }


def make_rng(seed: int, replica: int = 0) -> np.random.Generator:
    """One independent random stream per (seed, replica index)."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replica,)))


class EdgeWeightTable:
    """
    Lazily materialized part of the tree.

    Vertices get dense integer handles in visit order; handle 0 is the root.
    count[v] is the traversal count of the edge between v and its parent,
    so every visited edge is keyed by its lower endpoint.
    """

    def __init__(self, b: int, max_edges: Optional[int] = None):
        self.b = b
        self.max_edges = max_edges if max_edges is not None else get_max_edges()
        self.parent: list[int] = [-1]
        self.child_index: list[int] = [-1]
        self.depth: list[int] = [0]
        self.count: list[int] = [0]
        self.children: list[dict[int, int]] = [{}]

    def __len__(self) -> int:
        return len(self.parent)

    def add_child(self, vertex: int, index: int) -> int:
        """Materialize child `index` of `vertex` and return its handle."""
        if len(self.parent) > self.max_edges:
            raise ResourceLimitError(
                f"edge table exceeded budget of {self.max_edges} edges (set RTREE_MAX_EDGES to raise it)"
            )
        handle = len(self.parent)
        self.parent.append(vertex)
        self.child_index.append(index)
        self.depth.append(self.depth[vertex] + 1)
        self.count.append(0)
        self.children.append({})
        self.children[vertex][index] = handle
        return handle

    def unvisited_index(self, vertex: int, rank: int) -> int:
        """The rank-th (0-based) child index of `vertex` not yet materialized."""
        visited = self.children[vertex]
        for index in range(self.b):
            if index in visited:
                continue
            if rank == 0:
                return index
            rank -= 1
        raise IndexError(f"vertex {vertex} has no unvisited child of rank {rank}")

    def path_of(self, vertex: int) -> VertexId:
        path = []
        while vertex > 0:
            path.append(self.child_index[vertex])
            vertex = self.parent[vertex]
        return VertexId(tuple(reversed(path)))

    def lookup(self, vertex_id: VertexId) -> Optional[int]:
        handle = 0
        for index in vertex_id.path:
            handle = self.children[handle].get(index)
            if handle is None:
                return None
        return handle

    def traversals(self, vertex_id: VertexId) -> int:
        """Traversal count of the edge from vertex_id to its parent (0 if never traversed)."""
        handle = self.lookup(vertex_id)
        return 0 if handle is None else self.count[handle]

    def counts(self) -> dict[VertexId, int]:
        """The table as a map from edge (named by its lower vertex) to traversal count."""
        return {self.path_of(v): k for v, k in enumerate(self.count) if v > 0 and k > 0}

    def total_traversals(self) -> int:
        return sum(self.count)


class WalkState:
    """Mutable state of one walk: edge table, position and online level bookkeeping."""

    def __init__(self, b: int, scheme: Scheme, max_edges: Optional[int] = None):
        self.b = b
        self.scheme = scheme
        self.table = EdgeWeightTable(b, max_edges)
        self.current = 0
        self.steps = 0
        self.log_lr = 0.0
        self.first_visit: list[int] = [0]
        self.last_visit: list[int] = [0]

    @property
    def height(self) -> int:
        return self.table.depth[self.current]

    def _weights(self, vertex: int) -> tuple[float, list[tuple[int, float]], int]:
        table = self.table
        weight = self.scheme.weight
        parent_w = weight(table.count[vertex]) if vertex else 0.0
        child_ws = [(handle, weight(table.count[handle])) for handle in table.children[vertex].values()]
        fresh = self.b - len(child_ws)
        return parent_w, child_ws, fresh

    def advance(self, u: float, tilt: float = 0.0) -> bool:
        """
        Move one step using the uniform variate u in [0, 1).

        With a nonzero tilt the move is drawn from the proposal in which every
        child edge weight is multiplied by exp(tilt); the log likelihood ratio of
        the true law against the proposal is accumulated in `log_lr`.

        Returns:
            True if the walk moved away from the root (to a child)
        """
        table = self.table
        vertex = self.current
        parent_w, child_ws, fresh = self._weights(vertex)
        child_total = fresh + sum(w for _, w in child_ws)
        factor = math.exp(tilt) if tilt else 1.0
        total = parent_w + child_total
        proposal_total = parent_w + factor * child_total

        x = u * proposal_total
        if x < parent_w:
            target = table.parent[vertex]
            table.count[vertex] += 1
            forward = False
        else:
            x = (x - parent_w) / factor
            target = -1
            for handle, w in child_ws:
                if x < w:
                    target = handle
                    break
                x -= w
            if target < 0:
                if fresh > 0:
                    index = table.unvisited_index(vertex, min(int(x), fresh - 1))
                    target = table.add_child(vertex, index)
                else:
                    # float round-off past the last visited child
                    target = child_ws[-1][0]
            table.count[target] += 1
            forward = True

        if tilt:
            self.log_lr += math.log(proposal_total / total) - (tilt if forward else 0.0)

        self.current = target
        self.steps += 1
        height = table.depth[target]
        if height == len(self.first_visit):
            self.first_visit.append(self.steps)
            self.last_visit.append(self.steps)
        else:
            self.last_visit[height] = self.steps
        return forward


def neighbor_distribution(state: WalkState, current: Optional[VertexId] = None) -> list[tuple[VertexId, float]]:
    """
    Transition law out of a vertex under the current edge weights.

    Args:
        state: Walk state holding the edge table
        current: Vertex to evaluate; defaults to the walk's position

    Returns:
        (neighbor, probability) pairs: parent first (if any), then children by index
    """
    table = state.table
    vertex_id = current if current is not None else table.path_of(state.current)
    handle = table.lookup(vertex_id)
    visited = table.children[handle] if handle is not None else {}

    weighted: list[tuple[VertexId, float]] = []
    if vertex_id.depth > 0:
        weighted.append((vertex_id.parent(), state.scheme.weight(table.traversals(vertex_id))))
    for index in range(state.b):
        child = visited.get(index)
        w = state.scheme.weight(table.count[child]) if child is not None else 1.0
        weighted.append((vertex_id.child(index), w))

    if state.scheme.integral:
        # exact integer total for integral weights
        total = float(sum(int(w) for _, w in weighted))
    else:
        total = math.fsum(w for _, w in weighted)
    return [(v, w / total) for v, w in weighted]


def step(state: WalkState, rng: np.random.Generator, tilt: float = 0.0) -> WalkState:
    """Advance the walk one step with a fresh uniform from rng."""
    state.advance(float(rng.random()), tilt)
    return state


@dataclass
class TraceSummary:
    """Raw output of one simulated walk."""

    config: WalkConfig
    heights: np.ndarray
    table: EdgeWeightTable
    first_visit: list[int]
    last_visit: list[int]
    tilt: float = 0.0
    log_likelihood_ratio: float = 0.0

    @property
    def horizon(self) -> int:
        return len(self.heights) - 1

    @property
    def final_height(self) -> int:
        return int(self.heights[-1])

    @property
    def max_height(self) -> int:
        return len(self.first_visit) - 1

    @property
    def speed(self) -> float:
        return self.final_height / self.horizon if self.horizon else 0.0


def run(config: WalkConfig, tilt: float = 0.0) -> TraceSummary:
    """
    Simulate exactly `config.horizon` steps of the walk.

    Args:
        config: Walk identity (tree, scheme, horizon, seed, replica)
        tilt: Optional proposal tilt on child edges (0 = plain walk)

    Returns:
        TraceSummary with the height path, final edge table and level times

    Raises:
        ResourceLimitError: If the edge table outgrows config.max_edges
    """
    rng = make_rng(config.seed, config.replica)
    state = WalkState(config.b, config.scheme, config.max_edges)
    heights = [0] * (config.horizon + 1)
    depth = state.table.depth
    advance = state.advance

    j = 0
    while j < config.horizon:
        block = rng.random(min(UNIFORM_BLOCK, config.horizon - j)).tolist()
        for u in block:
            advance(u, tilt)
            j += 1
            heights[j] = depth[state.current]

    logger.debug(
        f"Walk {config.scheme.label()} b={config.b} replica={config.replica}: "
        f"h(X_n)={heights[-1]} after {config.horizon} steps, {len(state.table)} vertices"
    )
    return TraceSummary(
        config=config,
        heights=np.asarray(heights, dtype=np.int64),
        table=state.table,
        first_visit=state.first_visit,
        last_visit=state.last_visit,
        tilt=tilt,
        log_likelihood_ratio=state.log_lr,
    )
