"""Weighted-entropy selection of each beacon's high-quality observation points.

For every beacon the loop grows a candidate set (points where the beacon is the
strongest or near-strongest signal and above a floor), scores how the set spreads
over the graph edges around its centre, and relaxes the thresholds until the
spread score clears ``s_th``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from lidaus.signal import PathLossParams, expected_rssi
from lidaus.world import Edge, MultiLayerGridGraph, Node, Vec3


class ClampedCenterWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class ObservationPoint:
    step_index: int
    position: Vec3
    rssi: Mapping[str, float]
    host_edge: Edge | None = None


@dataclass(frozen=True)
class ClusteringParams:
    r_dl_init: float = 0.0
    # None: the RSSI expected at 10 m under the scenario's path-loss model
    r_th_c_init: float | None = None
    s_th: float = 0.3
    weights: tuple[float, float, float] = (1.0, 0.5, 0.25)
    max_iter: int = 10_000

    def __post_init__(self):
        wc, wa, wo = self.weights
        if not (wc >= wa >= wo > 0):
            raise ValueError("weights must satisfy w_core >= w_adjacent >= w_other > 0")
        if not 0 < self.s_th < 1:
            raise ValueError("s_th must lie in (0, 1)")

    def threshold_init(self, params: PathLossParams) -> float:
        if self.r_th_c_init is not None:
            return float(self.r_th_c_init)
        return float(expected_rssi(params, 10.0))


@dataclass(frozen=True)
class Cluster:
    beacon_id: str
    points: tuple[ObservationPoint, ...]
    center: Vec3 | None
    entropy: float
    edge_counts: Mapping[Edge, int]
    total: int
    r_dl: float
    r_th_c: float
    iterations: int
    flag: str | None = None  # "empty" | "clamped" | None

    @property
    def step_indices(self) -> frozenset[int]:
        return frozenset(p.step_index for p in self.points)

    def summary(self) -> dict:
        return {
            "beacon": self.beacon_id,
            "size": self.total,
            "center": None if self.center is None else [float(v) for v in self.center],
            "entropy": self.entropy,
            "r_dl": self.r_dl,
            "r_th_c": self.r_th_c,
            "iterations": self.iterations,
            "flag": self.flag,
            "points": sorted(self.step_indices),
        }


class ClusteringResult(NamedTuple):
    clusters: dict[str, Cluster]
    centers: dict[str, Vec3]
    absent: tuple[str, ...]


# ---------------------------------------------------------------------------
# geometry helpers


class _EdgeIndex:
    """Edge endpoints of one graph as arrays, for vectorised lookups."""

    def __init__(self, graph: MultiLayerGridGraph):
        self.edges = list(graph.edges)
        self.a_nodes = np.array([e[0] for e in self.edges], dtype=int).reshape(-1, 3)
        self.b_nodes = np.array([e[1] for e in self.edges], dtype=int).reshape(-1, 3)
        pos = lambda n: graph.position(tuple(n))  # noqa: E731
        self.a = np.array([pos(n) for n in self.a_nodes], dtype=float).reshape(-1, 3)
        self.b = np.array([pos(n) for n in self.b_nodes], dtype=float).reshape(-1, 3)

    def nearest(self, points: np.ndarray) -> np.ndarray:
        """Index of the nearest edge per point; ties go to the lexicographically smaller edge."""
        d = self.b - self.a
        dd = np.maximum(np.einsum("ij,ij->i", d, d), 1e-300)
        out = np.empty(len(points), dtype=int)
        for n, p in enumerate(points):
            t = np.clip(((p - self.a) * d).sum(axis=1) / dd, 0.0, 1.0)
            dist = np.linalg.norm(self.a + t[:, None] * d - p, axis=1)
            out[n] = int(np.flatnonzero(dist <= dist.min() + 1e-9)[0])
        return out


_INDEX_CACHE: dict[int, tuple[MultiLayerGridGraph, _EdgeIndex]] = {}


def _edge_index(graph: MultiLayerGridGraph) -> _EdgeIndex:
    hit = _INDEX_CACHE.get(id(graph))
    if hit is None or hit[0] is not graph:
        hit = (graph, _EdgeIndex(graph))
        _INDEX_CACHE[id(graph)] = hit
    return hit[1]


def host_edges(graph: MultiLayerGridGraph, positions: Sequence[Vec3]) -> list[Edge]:
    idx = _edge_index(graph)
    if len(positions) == 0:
        return []
    return [idx.edges[i] for i in idx.nearest(np.asarray(positions, dtype=float).reshape(-1, 3))]


def make_points(graph: MultiLayerGridGraph, steps: Iterable[tuple[int, Vec3, Mapping[str, float]]]) -> list[ObservationPoint]:
    """Build observation points and snap each to its host edge."""
    steps = list(steps)
    hosts = host_edges(graph, [s[1] for s in steps])
    return [
        ObservationPoint(int(k), Vec3(*map(float, p)), dict(r), h)
        for (k, p, r), h in zip(steps, hosts)
    ]


def cube_for_point(graph: MultiLayerGridGraph, p: Vec3) -> tuple[frozenset[Node], bool]:
    """Vertex set of the unit cell holding ``p`` and whether ``p`` had to be clamped.

    Points on a shared face or edge go to the lexicographically smaller cell.
    A single-layer graph yields a square cell.
    """
    nx_, ny = graph.shape
    cell = graph.cell_side
    clamped = not graph.spec.contains(p)

    def axis(v: float, n_nodes: int) -> int:
        if n_nodes < 2:
            return 0
        return min(max(math.ceil(v / cell - 1e-9) - 1, 0), n_nodes - 2)

    i0, j0 = axis(p[0], nx_), axis(p[1], ny)
    heights = graph.layer_heights
    if len(heights) < 2:
        ks = (0,)
    else:
        k0 = sum(1 for h in heights if h < p[2] - 1e-9) - 1
        k0 = min(max(k0, 0), len(heights) - 2)
        ks = (k0, k0 + 1)
    iis = (i0, i0 + 1) if nx_ > 1 else (0,)
    jjs = (j0, j0 + 1) if ny > 1 else (0,)
    return frozenset((i, j, k) for i in iis for j in jjs for k in ks), clamped


def classify_edges(
    edges: MultiLayerGridGraph | Iterable[Edge],
    cube: Iterable[Node],
    weights: tuple[float, float, float] = (1.0, 0.5, 0.25),
) -> dict[Edge, float]:
    """Weight per edge: core if both ends are cube vertices, adjacent if one is, else other."""
    edge_list = list(edges.edges) if isinstance(edges, MultiLayerGridGraph) else list(edges)
    verts = set(cube)
    wc, wa, wo = weights
    out = {}
    for e in edge_list:
        hits = (e[0] in verts) + (e[1] in verts)
        out[e] = wc if hits == 2 else wa if hits == 1 else wo
    return out


def weighted_entropy(counts, weights, n_edges: int, w_core: float = 1.0) -> float:
    """Edge-weighted entropy of a point distribution, normalised to [0, 1].

    ``counts[k]`` points fall on an edge of weight ``weights[k]``; ``n_edges``
    is the total number of graph edges.
    """
    c = np.asarray(counts, dtype=float)
    w = np.asarray(weights, dtype=float)
    if n_edges < 2:
        raise ValueError("need at least two graph edges")
    total = c.sum()
    if total < 1:
        raise ValueError("cluster must contain at least one point")
    nz = c > 0
    p = c[nz] / total
    s = float(-(w[nz] * p * np.log(p)).sum() / math.log(n_edges) / w_core)
    if s <= 0.0:
        return 0.0  # also turns -0.0 into 0.0
    return min(s, 1.0)


# ---------------------------------------------------------------------------
# the clustering loop


class _PointTable:
    """Dense RSSI table over points: one beacon column per id, NaN where missing."""

    def __init__(self, points: Sequence[ObservationPoint], graph: MultiLayerGridGraph, competitors: Sequence[str]):
        self.points = list(points)
        self.graph = graph
        self.index = _edge_index(graph)
        self.edge_pos = {e: n for n, e in enumerate(self.index.edges)}
        self.pos = np.array([p.position for p in self.points], dtype=float).reshape(-1, 3)
        missing = [n for n, p in enumerate(self.points) if p.host_edge is None]
        hosts = np.array([self.edge_pos.get(p.host_edge, -1) for p in self.points], dtype=int)
        if missing:
            hosts[missing] = self.index.nearest(self.pos[missing])
        self.host = hosts
        self.competitors = list(competitors)
        self.rssi = np.full((len(self.points), len(self.competitors)), np.nan)
        col = {b: n for n, b in enumerate(self.competitors)}
        for n, p in enumerate(self.points):
            for b, v in p.rssi.items():
                if b in col:
                    self.rssi[n, col[b]] = v
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            self.rmax = np.nanmax(self.rssi, axis=1) if self.competitors else np.full(len(self.points), np.nan)

    def beacon_rssi(self, beacon_id: str) -> np.ndarray:
        if beacon_id in self.competitors:
            return self.rssi[:, self.competitors.index(beacon_id)]
        return np.array([p.rssi.get(beacon_id, np.nan) for p in self.points], dtype=float)

    def edge_weights(self, cube: frozenset[Node], weights) -> np.ndarray:
        lo = np.array([min(n[a] for n in cube) for a in range(3)])
        hi = np.array([max(n[a] for n in cube) for a in range(3)])
        in_a = np.all((self.index.a_nodes >= lo) & (self.index.a_nodes <= hi), axis=1)
        in_b = np.all((self.index.b_nodes >= lo) & (self.index.b_nodes <= hi), axis=1)
        wc, wa, wo = weights
        return np.where(in_a & in_b, wc, np.where(in_a | in_b, wa, wo))


def _score(table: _PointTable, members: np.ndarray, params: ClusteringParams):
    center = Vec3(*map(float, table.pos[members].mean(axis=0)))
    cube, clamped = cube_for_point(table.graph, center)
    w = table.edge_weights(cube, params.weights)
    counts = np.bincount(table.host[members], minlength=len(table.index.edges))
    s = weighted_entropy(counts, w, max(len(table.index.edges), 2), params.weights[0])
    return center, clamped, counts, s


def _cluster(table: _PointTable, beacon_id: str, params: ClusteringParams, path_loss: PathLossParams) -> Cluster:
    r = table.beacon_rssi(beacon_id)
    cand = ~np.isnan(r)
    if not cand.any():
        raise ValueError(f"beacon {beacon_id!r} has no observation points")
    rmax = np.where(np.isnan(table.rmax), r, np.fmax(table.rmax, r))
    floor = float(np.nanmin(r[cand])) - 1.0
    cap = max(float(np.nanmax((rmax - r)[cand])), 0.0)
    r_dl = min(float(params.r_dl_init), cap)
    r_th = max(params.threshold_init(path_loss), floor)
    n_cand = int(cand.sum())

    s_prev2, s_prev = 0.0, None
    members = np.zeros_like(cand)
    center, clamped, counts, s = None, False, None, 0.0
    it = 0
    while it < params.max_iter:
        it += 1
        if s_prev is not None:
            at_th, at_dl = r_th <= floor, r_dl >= cap
            if s_prev <= s_prev2:
                if not at_th:
                    r_th = max(r_th - 1.0, floor)
                else:
                    r_dl = min(r_dl + 1.0, cap)
            else:
                if not at_dl:
                    r_dl = min(r_dl + 1.0, cap)
                else:
                    r_th = max(r_th - 1.0, floor)
            s_prev2 = s_prev
        with np.errstate(invalid="ignore"):
            members = cand & (r >= rmax - r_dl - 1e-9) & (r >= r_th)
        both_bound = r_th <= floor and r_dl >= cap
        if members.any():
            center, clamped, counts, s = _score(table, members, params)
        else:
            center, clamped, counts, s = None, False, None, 0.0
        if members.any() and (s >= params.s_th or int(members.sum()) == n_cand):
            break
        if both_bound:
            break
        s_prev = s

    pts = tuple(table.points[n] for n in np.flatnonzero(members))
    if not pts:
        return Cluster(beacon_id, (), None, 0.0, {}, 0, r_dl, r_th, it, "empty")
    edge_counts = {table.index.edges[k]: int(c) for k, c in enumerate(counts) if c}
    if clamped:
        warnings.warn(f"cluster centre for {beacon_id!r} outside the space; clamped", ClampedCenterWarning, stacklevel=3)
    return Cluster(beacon_id, pts, center, s, edge_counts, len(pts), r_dl, r_th, it, "clamped" if clamped else None)


def cluster_for_beacon(
    points: Sequence[ObservationPoint],
    beacon_id: str,
    params: ClusteringParams,
    graph: MultiLayerGridGraph,
    competitors: Sequence[str] | None = None,
    path_loss: PathLossParams = PathLossParams(),
) -> Cluster:
    """Run the threshold-relaxation loop for one beacon.

    ``competitors`` are the beacons whose RSSI counts toward the per-point
    maximum (default: every beacon seen in ``points``).
    """
    if competitors is None:
        competitors = sorted({b for p in points for b in p.rssi})
    table = _PointTable(points, graph, competitors)
    return _cluster(table, beacon_id, params, path_loss)


def cluster_all(
    points: Sequence[ObservationPoint],
    beacons: Sequence[str],
    params: ClusteringParams,
    graph: MultiLayerGridGraph,
    path_loss: PathLossParams = PathLossParams(),
    competitors: Sequence[str] | None = None,
) -> ClusteringResult:
    """Cluster every listed beacon; beacons never heard are reported in ``absent``."""
    comp = list(beacons) if competitors is None else list(competitors)
    table = _PointTable(points, graph, comp)
    clusters: dict[str, Cluster] = {}
    absent = []
    for b in beacons:
        r = table.beacon_rssi(b)
        if np.isnan(r).all():
            absent.append(b)
            continue
        clusters[b] = _cluster(table, b, params, path_loss)
    centers = {b: c.center for b, c in clusters.items() if c.center is not None}
    return ClusteringResult(clusters, centers, tuple(absent))


class EntropyClustering(BaseEstimator):
    """Estimator wrapper: ``fit(points)`` sets ``clusters_``, ``centers_`` and ``absent_``."""

    def __init__(
        self,
        graph: MultiLayerGridGraph | None = None,
        beacons: Sequence[str] | None = None,
        s_th: float = 0.3,
        r_dl_init: float = 0.0,
        r_th_c_init: float | None = None,
        weights: tuple[float, float, float] = (1.0, 0.5, 0.25),
        alpha: float = 2.0,
        beta: float = -46.4,
    ):
        self.graph = graph
        self.beacons = beacons
        self.s_th = s_th
        self.r_dl_init = r_dl_init
        self.r_th_c_init = r_th_c_init
        self.weights = weights
        self.alpha = alpha
        self.beta = beta

    def fit(self, points: Sequence[ObservationPoint], y=None):
        if self.graph is None:
            raise ValueError("EntropyClustering needs a graph")
        points = list(points)
        for p in points:
            if not isinstance(p, ObservationPoint):
                raise TypeError(f"expected ObservationPoint, got {type(p).__name__}")
        params = ClusteringParams(
            r_dl_init=self.r_dl_init, r_th_c_init=self.r_th_c_init, s_th=self.s_th, weights=tuple(self.weights)
        )
        beacons = self.beacons if self.beacons is not None else sorted({b for p in points for b in p.rssi})
        res = cluster_all(points, list(beacons), params, self.graph, PathLossParams(self.alpha, self.beta))
        self.clusters_, self.centers_, self.absent_ = res.clusters, res.centers, res.absent
        return self

    def predict(self, beacon_ids: Sequence[str] | None = None) -> np.ndarray:
        """Cluster centres as an ``(n, 3)`` array; rows of NaN for beacons without one."""
        check_is_fitted(self, "clusters_")
        ids = sorted(self.clusters_) if beacon_ids is None else list(beacon_ids)
        out = np.full((len(ids), 3), np.nan)
        for i, b in enumerate(ids):
            c = self.centers_.get(b)
            if c is not None:
                out[i] = c
        return out
