"""Flight path generation.

Exploring stage: a Chinese-Postman tour per layer (odd-degree matching plus
Hierholzer), stitched bottom-up through the origin column. Searching stages:
a Steiner tree over projected targets, its shortest branch, anchor drop points
along it, and a vertical detour at each target column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from lidaus.world import (
    MultiLayerGridGraph,
    Node,
    UnreachableError,
    Vec3,
    bfs_tree,
    path_from_parents,
)

EXACT_MATCHING_LIMIT = 12


@dataclass(frozen=True)
class Walk:
    """Ordered waypoints; ``nodes`` is set when every waypoint is a graph node."""

    points: tuple[Vec3, ...]
    nodes: tuple[Node, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(Vec3(*map(float, p)) for p in self.points))
        if self.nodes is not None:
            object.__setattr__(self, "nodes", tuple(tuple(n) for n in self.nodes))

    @classmethod
    def from_nodes(cls, graph: MultiLayerGridGraph, nodes: Sequence[Node]) -> "Walk":
        return cls(tuple(graph.position(n) for n in nodes), tuple(nodes))

    @property
    def total_length(self) -> float:
        p = np.asarray(self.points, dtype=float).reshape(-1, 3)
        return float(np.abs(np.diff(p, axis=0)).sum()) if len(p) > 1 else 0.0

    @property
    def closed(self) -> bool:
        return len(self.points) > 0 and self.points[0] == self.points[-1]

    def __len__(self) -> int:
        return len(self.points)


class Matching(NamedTuple):
    pairs: tuple[tuple[int, int], ...]
    cost: float
    lower_bound: float
    exact: bool

    @property
    def gap(self) -> float:
        return self.cost - self.lower_bound


@dataclass(frozen=True)
class ExploreTour:
    walk: Walk
    matching: Matching
    n_edges: int


@dataclass(frozen=True)
class StitchedPath:
    walk: Walk
    segments: tuple[Walk, ...]


@dataclass(frozen=True)
class SteinerTree:
    nodes: frozenset[Node]
    edges: frozenset[tuple[Node, Node]]
    root: Node
    terminals: frozenset[Node]

    @property
    def cost_hops(self) -> int:
        return len(self.edges)

    def adjacency(self) -> dict[Node, list[Node]]:
        adj: dict[Node, list[Node]] = {n: [] for n in self.nodes}
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        for nbrs in adj.values():
            nbrs.sort()
        return adj

    def leaves(self) -> list[Node]:
        return sorted(n for n, nb in self.adjacency().items() if len(nb) == 1 and n != self.root)


@dataclass(frozen=True)
class AnchorSchedule:
    positions: tuple[Vec3, ...]
    spacing: float | None
    step_indices: tuple[int, ...] = field(default=())


# ---------------------------------------------------------------------------
# matching


def min_cost_perfect_matching(dist) -> Matching:
    """Minimum-cost perfect matching on a complete graph given by a distance matrix.

    Exact subset DP up to ``EXACT_MATCHING_LIMIT`` nodes; above that a greedy
    matching refined by pairwise 2-opt exchanges, reported with a lower bound.
    """
    d = np.asarray(dist, dtype=float)
    n = d.shape[0]
    if d.ndim != 2 or d.shape[1] != n:
        raise ValueError("distance matrix must be square")
    if n % 2:
        raise ValueError(f"perfect matching needs an even node count, got {n}")
    if n == 0:
        return Matching((), 0.0, 0.0, True)
    lb = 0.5 * float(sum(min(d[i, j] for j in range(n) if j != i) for i in range(n)))
    if n <= EXACT_MATCHING_LIMIT:
        pairs, cost = _matching_dp(d)
        return Matching(pairs, cost, cost, True)
    pairs = _matching_greedy_2opt(d)
    cost = float(sum(d[i, j] for i, j in pairs))
    return Matching(pairs, cost, min(lb, cost), False)


def _matching_dp(d: np.ndarray) -> tuple[tuple[tuple[int, int], ...], float]:
    n = d.shape[0]
    full = (1 << n) - 1
    best = {full: (0.0, None)}

    def solve(mask: int) -> float:
        hit = best.get(mask)
        if hit is not None:
            return hit[0]
        i = 0
        while mask >> i & 1:
            i += 1
        choice, val = None, math.inf
        for j in range(i + 1, n):
            if not mask >> j & 1:
                c = d[i, j] + solve(mask | 1 << i | 1 << j)
                if c < val - 1e-12:
                    val, choice = c, (i, j)
        best[mask] = (val, choice)
        return val

    cost = solve(0)
    pairs, mask = [], 0
    while mask != full:
        i, j = best[mask][1]
        pairs.append((i, j))
        mask |= 1 << i | 1 << j
    return tuple(pairs), float(cost)


def _matching_greedy_2opt(d: np.ndarray) -> tuple[tuple[int, int], ...]:
    n = d.shape[0]
    cand = sorted((d[i, j], i, j) for i in range(n) for j in range(i + 1, n))
    used, pairs = set(), []
    for _, i, j in cand:
        if i not in used and j not in used:
            pairs.append([i, j])
            used.update((i, j))
    improved = True
    while improved:
        improved = False
        for a in range(len(pairs)):
            for b in range(a + 1, len(pairs)):
                (i, j), (k, l) = pairs[a], pairs[b]
                cur = d[i, j] + d[k, l]
                for x, y in (((i, k), (j, l)), ((i, l), (j, k))):
                    if d[x] + d[y] < cur - 1e-12:
                        pairs[a], pairs[b] = list(x), list(y)
                        cur = d[x] + d[y]
                        improved = True
                (i, j), (k, l) = pairs[a], pairs[b]
    return tuple(tuple(sorted(p)) for p in pairs)


# ---------------------------------------------------------------------------
# exploring tours


def _layer_adjacency(graph: MultiLayerGridGraph, layer: int) -> dict[Node, list[Node]]:
    adj: dict[Node, list[Node]] = {}
    for u, v in graph.layer_edges(layer):
        adj.setdefault(u, []).append(v)
        adj.setdefault(v, []).append(u)
    return adj


def eulerian_explore_path(graph: MultiLayerGridGraph, origin: Node, layer: int | None = None) -> ExploreTour:
    """Closed minimum-length walk from ``origin`` covering every edge of one layer."""
    layer = origin[2] if layer is None else layer
    adj = _layer_adjacency(graph, layer)
    n_edges = sum(len(v) for v in adj.values()) // 2
    if n_edges == 0:
        return ExploreTour(Walk.from_nodes(graph, [origin]), Matching((), 0.0, 0.0, True), 0)
    if origin not in adj:
        raise ValueError(f"origin {origin} has no edges on layer {layer}")
    reach = bfs_tree(graph, origin)
    if any(n not in reach for n in adj):
        raise UnreachableError(f"layer {layer} is disconnected")

    odd = sorted(n for n, nb in adj.items() if len(nb) % 2)
    trees = {u: bfs_tree(graph, u) for u in odd}
    dist = np.zeros((len(odd), len(odd)))
    for a, u in enumerate(odd):
        for b, v in enumerate(odd):
            if a != b:
                dist[a, b] = len(path_from_parents(trees[u], v)) - 1
    matching = min_cost_perfect_matching(dist)

    multi: dict[Node, list[Node]] = {n: list(nb) for n, nb in adj.items()}
    for a, b in matching.pairs:
        path = path_from_parents(trees[odd[a]], odd[b])
        for u, v in zip(path, path[1:]):
            multi[u].append(v)
            multi[v].append(u)

    circuit = _hierholzer(multi, origin)
    walk = Walk.from_nodes(graph, circuit)
    return ExploreTour(walk, _scaled(matching, graph.cell_side), n_edges)


def _scaled(m: Matching, cell: float) -> Matching:
    return Matching(m.pairs, m.cost * cell, m.lower_bound * cell, m.exact)


def _hierholzer(multi: dict[Node, list[Node]], start: Node) -> list[Node]:
    remaining = {n: sorted(nb, reverse=True) for n, nb in multi.items()}
    stack, circuit = [start], []
    while stack:
        v = stack[-1]
        nbrs = remaining[v]
        if nbrs:
            u = nbrs.pop()  # smallest neighbour first
            remaining[u].remove(v)
            stack.append(u)
        else:
            circuit.append(stack.pop())
    circuit.reverse()
    return circuit


def stitch_layers(tours: Sequence[Walk], graph: MultiLayerGridGraph) -> StitchedPath:
    """Join per-layer closed tours bottom-up, climbing the origin column between them.

    Produces ``2 * n_layers`` segments: each tour followed by a climb, and a
    final descent back to the ground origin (zero length for one layer).
    """
    if not tours:
        raise ValueError("need at least one layer tour")
    segments: list[Walk] = []
    for k, tour in enumerate(tours):
        segments.append(tour)
        end = tour.points[-1]
        if k + 1 < len(tours):
            nxt = tours[k + 1].points[0]
            segments.append(Walk((end, nxt)))
        else:
            start = tours[0].points[0]
            pts = [end]
            if end != start:
                pts.append(start)
            segments.append(Walk(tuple(pts)))
    points: list[Vec3] = []
    for seg in segments:
        for p in seg.points:
            if not points or points[-1] != p:
                points.append(p)
    return StitchedPath(Walk(tuple(points)), tuple(segments))


def exploring_path(graph: MultiLayerGridGraph) -> tuple[StitchedPath, list[ExploreTour]]:
    tours = [eulerian_explore_path(graph, (0, 0, k)) for k in range(graph.n_layers)]
    return stitch_layers([t.walk for t in tours], graph), tours


# ---------------------------------------------------------------------------
# Steiner tree


def steiner_tree(graph: MultiLayerGridGraph, terminals: Iterable[Node], root: Node) -> SteinerTree:
    """Metric-closure MST 2-approximation, pruned to terminal leaves."""
    terms = frozenset(terminals)
    if not terms:
        raise ValueError("at least one terminal is required")
    keys = sorted(terms | {root})
    trees = {u: bfs_tree(graph, u) for u in keys}
    for t in sorted(terms):
        if t not in trees[root]:
            raise UnreachableError(f"terminal {t} is unreachable from {root}")

    def hop(u, v):
        return len(path_from_parents(trees[u], v)) - 1

    closure = sorted((hop(u, v), u, v) for a, u in enumerate(keys) for v in keys[a + 1 :])
    union: set[tuple[Node, Node]] = set()
    for u, v in _kruskal(keys, closure):
        path = path_from_parents(trees[u], v)
        union.update(tuple(sorted(e)) for e in zip(path, path[1:]))

    nodes = sorted({n for e in union for n in e} | {root})
    tree_edges = set(_kruskal(nodes, sorted((1, u, v) for u, v in union)))

    # prune non-terminal leaves
    protected = terms | {root}
    adj: dict[Node, set[Node]] = {n: set() for n in nodes}
    for u, v in tree_edges:
        adj[u].add(v)
        adj[v].add(u)
    queue = [n for n in nodes if len(adj[n]) <= 1 and n not in protected]
    while queue:
        n = queue.pop()
        if n not in adj:
            continue
        for m in adj.pop(n):
            adj[m].discard(n)
            tree_edges.discard(tuple(sorted((n, m))))
            if len(adj[m]) <= 1 and m not in protected:
                queue.append(m)
    return SteinerTree(frozenset(adj), frozenset(tree_edges), root, terms)


def _kruskal(nodes, weighted_edges):
    parent = {n: n for n in nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    out = []
    for _, u, v in weighted_edges:
        ru, rv = find(u), find(v)
        if ru != rv:
            parent[max(ru, rv)] = min(ru, rv)
            out.append((u, v) if u <= v else (v, u))
    return out


def tree_paths(tree: SteinerTree) -> dict[Node, list[Node]]:
    """Root-to-node path for every node of the tree."""
    adj = tree.adjacency()
    paths = {tree.root: [tree.root]}
    stack = [tree.root]
    while stack:
        u = stack.pop()
        for v in adj.get(u, []):
            if v not in paths:
                paths[v] = paths[u] + [v]
                stack.append(v)
    return paths


def shortest_branch(
    tree: SteinerTree, graph: MultiLayerGridGraph, leaves: Iterable[Node] | None = None
) -> Walk:
    """Shortest root-to-leaf path of the tree; ties go to the smaller leaf.

    ``leaves`` restricts the admissible end nodes (they may be interior).
    """
    paths = tree_paths(tree)
    if leaves is None:
        ends = tree.leaves() or [tree.root]
    else:
        ends = sorted(n for n in set(leaves) if n in paths)
        if not ends:
            raise ValueError("none of the requested end nodes is in the tree")
    best = min(ends, key=lambda n: (len(paths[n]), n))
    return Walk.from_nodes(graph, paths[best])


# ---------------------------------------------------------------------------
# anchors, detours, stepping


def densify(points: Sequence[Vec3], step_length: float) -> list[Vec3]:
    """Insert intermediate points so consecutive ones are at most ``step_length`` apart.

    Every segment must be axis-aligned; the last step of a segment may be short.
    """
    if step_length <= 0:
        raise ValueError("step_length must be positive")
    pts = [np.asarray(p, dtype=float) for p in points]
    if not pts:
        return []
    out = [Vec3(*pts[0])]
    for a, b in zip(pts, pts[1:]):
        d = b - a
        moving = np.flatnonzero(np.abs(d) > 1e-12)
        if len(moving) == 0:
            continue
        if len(moving) > 1:
            raise ValueError(f"segment {a} -> {b} is not axis-aligned")
        ax = int(moving[0])
        length = abs(d[ax])
        n_full = int(math.floor(length / step_length + 1e-9))
        for s in range(1, n_full + 1):
            q = a.copy()
            q[ax] += math.copysign(min(s * step_length, length), d[ax])
            out.append(Vec3(*q))
        if n_full * step_length < length - 1e-9:
            out.append(Vec3(*b))
        else:
            out[-1] = Vec3(*b)
    return out


def manhattan_route(a: Vec3, b: Vec3, order: str = "xyz") -> list[Vec3]:
    """Corner points of an axis-by-axis route from ``a`` to ``b``."""
    cur = list(map(float, a))
    out = [Vec3(*cur)]
    for ax in ("xyz".index(c) for c in order):
        if abs(cur[ax] - b[ax]) > 1e-12:
            cur[ax] = float(b[ax])
            out.append(Vec3(*cur))
    return out


def anchor_schedule(
    walk: Walk, spacing: float | None, already_deployed: Iterable[Vec3] = ()
) -> AnchorSchedule:
    """Drop points every ``spacing`` metres of path, snapped to the walk's points.

    Points already holding an anchor are skipped; ``spacing=None`` yields none.
    """
    if spacing is None or len(walk.points) == 0:
        return AnchorSchedule((), spacing, ())
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    pts = np.asarray(walk.points, dtype=float).reshape(-1, 3)
    cum = np.concatenate([[0.0], np.cumsum(np.abs(np.diff(pts, axis=0)).sum(axis=1))])
    taken = {_key(p) for p in already_deployed}
    chosen: list[int] = []
    n_marks = int(math.floor(cum[-1] / spacing + 1e-9))
    for m in range(n_marks + 1):
        idx = int(np.argmin(np.abs(cum - m * spacing)))
        key = _key(pts[idx])
        if key in taken:
            continue
        taken.add(key)
        chosen.append(idx)
    return AnchorSchedule(tuple(Vec3(*pts[i]) for i in chosen), spacing, tuple(chosen))


def _key(p) -> tuple[float, float, float]:
    return tuple(round(float(v), 6) for v in p)


def detour_walk(
    base: Vec3,
    z_target: float,
    side: float = 1.0,
    bounds: tuple[float, float, float] | None = None,
) -> Walk:
    """Climb from ``base`` to ``z_target``, fly a square loop, and come back down.

    The loop turns toward +x/+y unless that would leave ``bounds``.
    """
    x, y, z0 = map(float, base)
    if bounds is not None:
        z_target = min(max(z_target, 0.0), bounds[2])
    sx = sy = side
    if bounds is not None:
        if x + side > bounds[0] + 1e-9:
            sx = -side
        if y + side > bounds[1] + 1e-9:
            sy = -side
    pts = [Vec3(x, y, z0)]
    if abs(z_target - z0) > 1e-12:
        pts.append(Vec3(x, y, z_target))
    if side > 0:
        pts += [
            Vec3(x + sx, y, z_target),
            Vec3(x + sx, y + sy, z_target),
            Vec3(x, y + sy, z_target),
            Vec3(x, y, z_target),
        ]
    if abs(z_target - z0) > 1e-12:
        pts.append(Vec3(x, y, z0))
    return Walk(tuple(pts))


def figure_eight_waypoints(width: float, depth: float, z: float = 0.0) -> list[Vec3]:
    """The fixed two-loop route, scaled to a ``width`` by ``depth`` floor."""
    frac = [(0, 0), (0.5, 0), (0.5, 1), (1, 1), (1, 0.5), (0, 0.5), (0, 0)]
    return [Vec3(fx * width, fy * depth, z) for fx, fy in frac]
