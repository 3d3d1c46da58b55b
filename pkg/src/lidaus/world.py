"""Discretized 3D space: layer grid graphs, obstacles, beacons and graph queries."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from lidaus.signal import PathLossParams

Node = tuple[int, int, int]  # (i, j, layer)
Edge = tuple[Node, Node]  # sorted endpoint pair


class Vec3(NamedTuple):
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)


class DisconnectedLayerError(ValueError):
    """A layer's grid graph falls apart after obstacle removal."""

    def __init__(self, layer: int):
        super().__init__(f"layer {layer} is disconnected after obstacle removal")
        self.layer = layer


class UnreachableError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned obstacle box given by its min and max corners."""

    lo: Vec3
    hi: Vec3

    def __post_init__(self):
        object.__setattr__(self, "lo", Vec3(*map(float, self.lo)))
        object.__setattr__(self, "hi", Vec3(*map(float, self.hi)))
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError(f"box corners out of order: {self.lo} > {self.hi}")

    def intersects_segment(self, a: Vec3, b: Vec3) -> bool:
        # Slab test against the open interior; grazing a face does not count.
        t0, t1 = 0.0, 1.0
        for p, q, lo, hi in zip(a, b, self.lo, self.hi):
            d = q - p
            if d == 0.0:
                if not lo < p < hi:
                    return False
                continue
            ta, tb = (lo - p) / d, (hi - p) / d
            if ta > tb:
                ta, tb = tb, ta
            t0, t1 = max(t0, ta), min(t1, tb)
            if t0 >= t1:
                return False
        return True


@dataclass(frozen=True)
class SpaceSpec:
    width: float
    depth: float
    height: float
    layer_heights: tuple[float, ...]
    cell_side: float
    obstacles: tuple[Box, ...] = ()
    vertical_columns: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "layer_heights", tuple(float(h) for h in self.layer_heights))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(
            self, "vertical_columns", tuple((int(i), int(j)) for i, j in self.vertical_columns)
        )
        if self.cell_side <= 0:
            raise ValueError("cell_side must be positive")
        if not self.layer_heights:
            raise ValueError("at least one layer height is required")
        if any(b <= a for a, b in zip(self.layer_heights, self.layer_heights[1:])):
            raise ValueError("layer_heights must be strictly increasing")
        if self.layer_heights[0] < 0 or self.layer_heights[-1] > self.height:
            raise ValueError("layer_heights must lie within [0, height]")
        for name in ("width", "depth"):
            n = getattr(self, name) / self.cell_side
            if abs(n - round(n)) > 1e-9 or round(n) < 1:
                raise ValueError(f"{name} must be a positive integer multiple of cell_side")

    @property
    def shape(self) -> tuple[int, int]:
        """Node counts along x and y."""
        return (
            int(round(self.width / self.cell_side)) + 1,
            int(round(self.depth / self.cell_side)) + 1,
        )

    def contains(self, p: Vec3, tol: float = 1e-9) -> bool:
        return (
            -tol <= p[0] <= self.width + tol
            and -tol <= p[1] <= self.depth + tol
            and -tol <= p[2] <= self.height + tol
        )


@dataclass(frozen=True)
class Beacon:
    id: str
    kind: str  # "target" | "anchor"
    true_position: Vec3
    params: PathLossParams

    def __post_init__(self):
        if self.kind not in ("target", "anchor"):
            raise ValueError(f"unknown beacon kind {self.kind!r}")
        object.__setattr__(self, "true_position", Vec3(*map(float, self.true_position)))


@dataclass(frozen=True, eq=False)
class MultiLayerGridGraph:
    """Per-layer 4-neighbour grid graphs joined by vertical links.

    Nodes are integer triples ``(i, j, layer)``; positions follow from
    ``cell_side`` and ``layer_heights``. Instances are immutable.
    """

    spec: SpaceSpec
    edges: tuple[Edge, ...]
    adjacency: dict = field(repr=False)

    @property
    def cell_side(self) -> float:
        return self.spec.cell_side

    @property
    def layer_heights(self) -> tuple[float, ...]:
        return self.spec.layer_heights

    @property
    def n_layers(self) -> int:
        return len(self.spec.layer_heights)

    @property
    def shape(self) -> tuple[int, int]:
        return self.spec.shape

    def nodes(self, layer: int | None = None) -> list[Node]:
        nx_, ny = self.shape
        layers = range(self.n_layers) if layer is None else [layer]
        return [(i, j, k) for k in layers for i in range(nx_) for j in range(ny)]

    def position(self, node: Node) -> Vec3:
        i, j, k = node
        return Vec3(i * self.cell_side, j * self.cell_side, self.layer_heights[k])

    def neighbors(self, node: Node) -> list[Node]:
        return self.adjacency.get(node, [])

    def layer_edges(self, layer: int) -> list[Edge]:
        return [e for e in self.edges if e[0][2] == layer and e[1][2] == layer]

    def vertical_edges(self) -> list[Edge]:
        return [e for e in self.edges if e[0][2] != e[1][2]]

    def has_edge(self, u: Node, v: Node) -> bool:
        return v in self.adjacency.get(u, ())

    def node_at(self, p: Vec3, tol: float = 1e-6) -> Node | None:
        """Node whose position equals ``p`` (within ``tol``), else None."""
        i = round(p[0] / self.cell_side)
        j = round(p[1] / self.cell_side)
        nx_, ny = self.shape
        if not (0 <= i < nx_ and 0 <= j < ny):
            return None
        for k, h in enumerate(self.layer_heights):
            node = (i, j, k)
            q = self.position(node)
            if max(abs(q[0] - p[0]), abs(q[1] - p[1]), abs(h - p[2])) <= tol:
                return node
        return None

    def edge_segment(self, e: Edge) -> tuple[np.ndarray, np.ndarray]:
        return self.position(e[0]).as_array(), self.position(e[1]).as_array()


def _edge(u: Node, v: Node) -> Edge:
    return (u, v) if u <= v else (v, u)


def discretize(spec: SpaceSpec) -> MultiLayerGridGraph:
    """Build one grid graph per layer, drop edges crossing obstacles, link layers.

    Vertical links exist at the origin column plus ``spec.vertical_columns``.

    Raises:
        DisconnectedLayerError: when obstacle removal splits a layer.
    """
    nx_, ny = spec.shape
    cell = spec.cell_side
    heights = spec.layer_heights

    def pos(n: Node) -> Vec3:
        return Vec3(n[0] * cell, n[1] * cell, heights[n[2]])

    def blocked(u: Node, v: Node) -> bool:
        a, b = pos(u), pos(v)
        return any(box.intersects_segment(a, b) for box in spec.obstacles)

    edges: list[Edge] = []
    for k in range(len(heights)):
        for i in range(nx_):
            for j in range(ny):
                u = (i, j, k)
                for v in ((i + 1, j, k), (i, j + 1, k)):
                    if v[0] < nx_ and v[1] < ny and not blocked(u, v):
                        edges.append(_edge(u, v))
    columns = sorted({(0, 0), *spec.vertical_columns})
    for i, j in columns:
        if not (0 <= i < nx_ and 0 <= j < ny):
            raise ValueError(f"vertical column {(i, j)} outside the grid")
        for k in range(len(heights) - 1):
            u, v = (i, j, k), (i, j, k + 1)
            if not blocked(u, v):
                edges.append(_edge(u, v))
    edges.sort()

    adjacency: dict[Node, list[Node]] = {}
    for u, v in edges:
        adjacency.setdefault(u, []).append(v)
        adjacency.setdefault(v, []).append(u)
    for nbrs in adjacency.values():
        nbrs.sort()

    graph = MultiLayerGridGraph(spec=spec, edges=tuple(edges), adjacency=adjacency)
    for k in range(len(heights)):
        _check_layer_connected(graph, k)
    return graph


def _check_layer_connected(graph: MultiLayerGridGraph, layer: int) -> None:
    # Nodes swallowed by an obstacle are isolated on purpose and ignored here.
    live = [n for n in graph.nodes(layer) if any(m[2] == layer for m in graph.neighbors(n))]
    if not live:
        if len(graph.nodes(layer)) > 1:
            raise DisconnectedLayerError(layer)
        return
    seen = {live[0]}
    queue = deque([live[0]])
    while queue:
        u = queue.popleft()
        for v in graph.neighbors(u):
            if v[2] == layer and v not in seen:
                seen.add(v)
                queue.append(v)
    if len(seen) != len(live):
        raise DisconnectedLayerError(layer)


def ground_graph(spec: SpaceSpec, cell_side: float = 1.0) -> MultiLayerGridGraph:
    """Single-layer grid at floor height with the given cell size (search stages)."""
    ground = SpaceSpec(
        width=spec.width,
        depth=spec.depth,
        height=spec.height,
        layer_heights=(spec.layer_heights[0],),
        cell_side=cell_side,
        obstacles=spec.obstacles,
    )
    return discretize(ground)


class Projection(NamedTuple):
    node: Node
    clamped: bool


def project_to_ground(p: Vec3, g: MultiLayerGridGraph) -> Projection:
    """Nearest ground-layer node in the x-y plane.

    Ties go to the lexicographically smallest ``(i, j)``. Points outside the
    footprint are clamped onto it and flagged.
    """
    nx_, ny = g.shape
    cell = g.cell_side
    x, y = float(p[0]), float(p[1])
    clamped = not (0.0 <= x <= g.spec.width and 0.0 <= y <= g.spec.depth)
    x = min(max(x, 0.0), g.spec.width)
    y = min(max(y, 0.0), g.spec.depth)

    def axis_index(v: float, n: int) -> int:
        lo = min(int(math.floor(v / cell)), n - 1)
        hi = min(lo + 1, n - 1)
        # strict < keeps the lower index on exact ties
        return hi if abs(hi * cell - v) < abs(lo * cell - v) else lo

    node = (axis_index(x, nx_), axis_index(y, ny), 0)
    if g.neighbors(node) or nx_ * ny == 1:
        return Projection(node, clamped)
    # nearest node sits inside an obstacle; fall back to the nearest live one
    best = min(
        (n for n in g.nodes(0) if g.neighbors(n)),
        key=lambda n: ((n[0] * cell - x) ** 2 + (n[1] * cell - y) ** 2, n),
    )
    return Projection(best, clamped)


def bfs_tree(g: MultiLayerGridGraph, source: Node, layer_only: bool = True) -> dict[Node, Node | None]:
    """Breadth-first parent map; neighbours are expanded in lexicographic order."""
    parents: dict[Node, Node | None] = {source: None}
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in g.neighbors(u):
            if layer_only and v[2] != source[2]:
                continue
            if v not in parents:
                parents[v] = u
                queue.append(v)
    return parents


def path_from_parents(parents: dict[Node, Node | None], target: Node) -> list[Node]:
    path = [target]
    while parents[path[-1]] is not None:
        path.append(parents[path[-1]])
    path.reverse()
    return path


def shortest_path(g: MultiLayerGridGraph, u: Node, v: Node) -> tuple[list[Node], float]:
    """Minimum-hop path between two nodes of one layer and its length in meters."""
    if u[2] != v[2]:
        raise ValueError(f"nodes {u} and {v} are on different layers")
    parents = bfs_tree(g, u)
    if v not in parents:
        raise UnreachableError(f"no path from {u} to {v}")
    path = path_from_parents(parents, v)
    return path, (len(path) - 1) * g.cell_side


def segment_length(points: Iterable[Vec3]) -> float:
    pts = [np.asarray(p, dtype=float) for p in points]
    return float(sum(np.linalg.norm(b - a) for a, b in zip(pts, pts[1:])))
