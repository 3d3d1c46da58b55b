"""End-to-end missions: the staged search, two baselines, and fixed-route runs.

A mission owns one :class:`~lidaus.simulator.Simulator` (ground truth) and one
filter. Every step moves the simulated UAV, collects RSSI medians, runs the
filter and appends an annotated record to the log; planners only ever see the
filter's estimates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from lidaus import metrics as metrics_mod
from lidaus.clustering import ClusteringParams, Cluster, cluster_all, host_edges, ObservationPoint
from lidaus.planning import (
    Walk,
    anchor_schedule,
    densify,
    detour_walk,
    exploring_path,
    figure_eight_waypoints,
    manhattan_route,
    shortest_branch,
    steiner_tree,
)
from lidaus.signal import NoiseSpec, PathLossParams, distance_from_rssi, expected_rssi
from lidaus.simulator import Simulator
from lidaus.uslam import (
    BeaconEstimate,
    FilterConfig,
    FilterState,
    MotionCommand,
    ObservationRecord,
    annotate,
    replay,
    slam_step,
)
from lidaus.world import (
    Beacon,
    MultiLayerGridGraph,
    Node,
    SpaceSpec,
    Vec3,
    discretize,
    ground_graph,
    project_to_ground,
)

METHODS = ("lidaus", "naive", "random")


@dataclass(frozen=True)
class MissionConfig:
    space: SpaceSpec
    targets: tuple[Beacon, ...] = ()
    params: PathLossParams = field(default_factory=PathLossParams)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    n_particles: int = 100
    anchor_spacing: float | None = 4.0
    found_rssi_threshold: float = -51.0
    # distance the threshold is meant to represent; checked against the model
    found_distance: float | None = None
    n_th: int = 3
    max_stages: int = 5
    max_steps: int = 10_000
    step_length: float = 1.0
    samples_per_point: int = 20
    clustering: ClusteringParams = field(default_factory=ClusteringParams)
    seed: int = 0
    detour_side: float = 1.0
    search_cell: float = 1.0
    naive_counter_limit: int = 5
    align_tolerance: float = 0.1
    route: tuple[Vec3, ...] | None = None
    replay_threshold: float | None = None
    rssi_floor: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(self.targets))
        if self.route is not None:
            object.__setattr__(self, "route", tuple(Vec3(*map(float, p)) for p in self.route))
        if not self.step_length > 0:
            raise ValueError("step_length must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if self.n_th < 1:
            raise ValueError("n_th must be >= 1")
        if self.samples_per_point < 1:
            raise ValueError("samples_per_point must be >= 1")
        if self.anchor_spacing is not None and not self.anchor_spacing > 0:
            raise ValueError("anchor_spacing must be positive or None")
        if self.found_distance is not None:
            d = distance_from_rssi(self.params, self.found_rssi_threshold)
            if abs(d - self.found_distance) > 0.1:
                raise ValueError(
                    f"found_rssi_threshold {self.found_rssi_threshold} dBm maps to {d:.3f} m, "
                    f"not the declared {self.found_distance} m"
                )
        ids = [b.id for b in self.targets]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate target ids")
        for b in self.targets:
            if not self.space.contains(b.true_position):
                raise ValueError(f"target {b.id} lies outside the space")

    @property
    def target_ids(self) -> list[str]:
        return [b.id for b in self.targets]

    def with_(self, **changes) -> "MissionConfig":
        return replace(self, **changes)


@dataclass
class StageResult:
    index: int
    kind: str  # "exploring" | "searching" | "route"
    walk: Walk
    first_step: int
    last_step: int
    clusters: dict[str, dict] = field(default_factory=dict)
    estimates: dict[str, BeaconEstimate] = field(default_factory=dict)
    newly_found: tuple[str, ...] = ()
    anchors: tuple[tuple[str, Vec3], ...] = ()
    tree_nodes: tuple[Node, ...] = ()
    branch: tuple[Node, ...] = ()
    # beacon -> (replayed step indices, prior) for every estimate above
    replays: dict[str, tuple[tuple[int, ...], BeaconEstimate]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "kind": self.kind,
            "steps": [self.first_step, self.last_step],
            "walk_length": self.walk.total_length,
            "clusters": self.clusters,
            "estimates": {k: v.to_dict() for k, v in sorted(self.estimates.items())},
            "newly_found": list(self.newly_found),
            "anchors": [[a, list(p)] for a, p in self.anchors],
            "tree_nodes": [list(n) for n in self.tree_nodes],
            "branch": [list(n) for n in self.branch],
            "replays": {
                b: {"points": list(pts), "init": init.to_dict()} for b, (pts, init) in sorted(self.replays.items())
            },
        }


@dataclass
class MissionReport:
    method: str
    seed: int
    stages: list[StageResult]
    estimates: dict[str, BeaconEstimate]
    found: tuple[str, ...]
    total_steps: int
    total_anchors: int
    termination: str
    log: list[ObservationRecord]
    metrics: metrics_mod.Metrics
    live_estimates: dict[str, BeaconEstimate] = field(default_factory=dict)
    # errors of the route run's threshold replay, when one was made
    replay_metrics: metrics_mod.Metrics | None = None

    @property
    def mean_error(self) -> float:
        return self.metrics.mean_error

    def trajectory(self) -> list[tuple[float, float, float]]:
        return [tuple(r.pose_estimate_at_record) for r in self.log]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "termination": self.termination,
            "total_steps": self.total_steps,
            "total_anchors": self.total_anchors,
            "found": list(self.found),
            "estimates": {k: v.to_dict() for k, v in sorted(self.estimates.items())},
            "live_estimates": {k: v.to_dict() for k, v in sorted(self.live_estimates.items())},
            "metrics": self.metrics.to_dict(),
            "replay_metrics": None if self.replay_metrics is None else self.replay_metrics.to_dict(),
            "stages": [s.to_dict() for s in self.stages],
        }


class _BudgetExhausted(Exception):
    pass


class Flight:
    """One simulated UAV plus its filter and observation log."""

    def __init__(self, config: MissionConfig, step_cap: int | None = None):
        self.cfg = config
        space = config.space
        self.h0 = space.layer_heights[0]
        self.sim = Simulator(
            space, config.targets, config.params, config.noise, config.seed,
            config.samples_per_point, config.rssi_floor,
        )
        fcfg = FilterConfig(
            n_particles=config.n_particles,
            params=config.params,
            samples_per_point=config.samples_per_point,
            space_height=space.height,
            ground_z=self.h0,
        )
        self.filter = FilterState(fcfg, config.noise, seed=config.seed, origin=(0.0, 0.0, self.h0))
        self.log: list[ObservationRecord] = []
        self.nominal = Vec3(0.0, 0.0, self.h0)
        self.moves = 0
        self.step_cap = config.max_steps if step_cap is None else step_cap
        self.anchors: list[tuple[str, Vec3]] = []
        self.stage = 0
        self._hosts: dict[int, tuple] = {}
        self.z_bounds = (self.h0, space.height)

    @property
    def target_ids(self) -> list[str]:
        return self.cfg.target_ids

    # -- stepping -----------------------------------------------------------

    def _record(self, u: MotionCommand, planned: Vec3) -> ObservationRecord:
        h = self.sim.move(u, planned[2])
        rssi = self.sim.observe()
        rec = ObservationRecord(len(self.log), u, h, rssi, tuple(map(float, planned)), self.stage)
        slam_step(self.filter, rec)
        rec = annotate(self.filter, rec)
        self.log.append(rec)
        return rec

    def observe_here(self) -> ObservationRecord:
        return self._record(MotionCommand(), self.nominal)

    def step_to(self, p: Vec3) -> ObservationRecord:
        if self.moves >= self.step_cap:
            raise _BudgetExhausted
        d = np.asarray(p, dtype=float) - np.asarray(self.nominal, dtype=float)
        d[np.abs(d) < 1e-12] = 0.0
        u = MotionCommand(float(d[0]), float(d[1]), float(d[2]))
        self.nominal = Vec3(*map(float, p))
        self.moves += 1
        return self._record(u, self.nominal)

    def fly(self, waypoints: Sequence[Vec3], on_step=None) -> None:
        pts = densify([self.nominal, *waypoints], self.cfg.step_length)
        for p in pts[1:]:
            rec = self.step_to(p)
            if on_step is not None:
                on_step(rec)

    def align_xy(self, target: Vec3) -> None:
        """Correct the planar offset between the filter's pose and ``target``."""
        est = self.filter.pose_estimate()
        for ax in (0, 1):
            delta = float(target[ax] - est[ax])
            if abs(delta) <= self.cfg.align_tolerance:
                continue
            n = max(1, math.ceil(abs(delta) / self.cfg.step_length - 1e-9))
            for _ in range(n):
                if self.moves >= self.step_cap:
                    raise _BudgetExhausted
                step = delta / n
                u = MotionCommand(step if ax == 0 else 0.0, step if ax == 1 else 0.0, 0.0)
                self.moves += 1
                self._record(u, target)
        self.nominal = Vec3(float(target[0]), float(target[1]), self.nominal[2])

    def deploy_anchor(self) -> str:
        aid = f"A{len(self.anchors):03d}"
        self.sim.deploy_anchor(aid)
        self.filter.deploy_anchor(aid)
        self.anchors.append((aid, Vec3(self.nominal[0], self.nominal[1], self.h0)))
        return aid

    def land_at_home(self) -> None:
        """Return to the origin along the nominal plan and land on the home pad."""
        if self.nominal != Vec3(0.0, 0.0, self.h0):
            self.fly(manhattan_route(self.nominal, Vec3(0.0, 0.0, self.nominal[2]), "zxy")[1:])
            self.fly([Vec3(0.0, 0.0, self.h0)])
        self.sim.land_at_home()
        self.filter.reset_pose((0.0, 0.0))
        self.nominal = Vec3(0.0, 0.0, self.h0)

    # -- evaluation -----------------------------------------------------------

    def observation_points(self, graph: MultiLayerGridGraph) -> list[ObservationPoint]:
        new = [r for r in self.log if r.step_index not in self._hosts]
        if new:
            for r, h in zip(new, host_edges(graph, [r.planned_position for r in new])):
                self._hosts[r.step_index] = h
        targets = set(self.target_ids)
        return [
            ObservationPoint(
                r.step_index, Vec3(*r.planned_position),
                {k: v for k, v in r.rssi_medians.items() if k in targets}, self._hosts[r.step_index],
            )
            for r in self.log
        ]

    def cluster_and_replay(
        self, graph: MultiLayerGridGraph, beacon_ids: Sequence[str]
    ) -> tuple[dict[str, Cluster], dict[str, BeaconEstimate], dict]:
        points = self.observation_points(graph)
        res = cluster_all(points, list(beacon_ids), self.cfg.clustering, graph, self.cfg.params, self.target_ids)
        out, inputs = {}, {}
        for bid, cl in res.clusters.items():
            if cl.center is None:
                continue
            init = cluster_init(cl)
            pts = tuple(sorted(cl.step_indices))
            out[bid] = replay(
                self.log, bid, pts, init, self.cfg.params,
                self.cfg.noise.rssi_std, self.cfg.samples_per_point, z_bounds=self.z_bounds,
            )
            inputs[bid] = (pts, init)
        return res.clusters, out, inputs

    def evaluate(self, estimates: Mapping[str, BeaconEstimate]) -> metrics_mod.Metrics:
        est_mu = {b: e.mu for b, e in estimates.items() if b in set(self.target_ids)}
        truth = metrics_mod.ground_truth(self.sim, self.target_ids)
        return metrics_mod.compute_metrics(est_mu, truth, self.moves, len(self.anchors))

    def report(self, method: str, stages, estimates, found, termination, live=None) -> MissionReport:
        return MissionReport(
            method, self.cfg.seed, stages, dict(estimates), tuple(sorted(found)), self.moves,
            len(self.anchors), termination, self.log, self.evaluate(estimates), dict(live or {}),
        )


def cluster_init(cl: Cluster) -> BeaconEstimate:
    """Replay prior: the cluster centre, per-axis variance from the point spread (at least 1 m²)."""
    pos = np.array([p.position for p in cl.points], dtype=float)
    var = np.maximum(pos.var(axis=0), 1.0)
    return BeaconEstimate(np.asarray(cl.center, dtype=float), np.diag(var))


def selection_init(positions: np.ndarray) -> BeaconEstimate:
    var = np.maximum(positions.var(axis=0), 1.0)
    return BeaconEstimate(positions.mean(axis=0), np.diag(var))


def _found_counts(records: Iterable[ObservationRecord], ids: Iterable[str], threshold: float) -> dict[str, int]:
    ids = list(ids)
    counts = dict.fromkeys(ids, 0)
    for r in records:
        for b in ids:
            v = r.rssi_medians.get(b)
            if v is not None and v > threshold:
                counts[b] += 1
    return counts


# ---------------------------------------------------------------------------
# the staged mission


def run_exploring_stage(flight: Flight, graph: MultiLayerGridGraph) -> StageResult:
    """Fly the stitched edge-covering tour, then cluster and replay every target."""
    flight.stage = 0
    first = len(flight.log)
    if not flight.log:
        flight.observe_here()
    path, _ = exploring_path(graph)
    try:
        flight.fly(path.walk.points[1:])
    except _BudgetExhausted:
        pass
    clusters, estimates, inputs = flight.cluster_and_replay(graph, flight.target_ids)
    return StageResult(
        0, "exploring", path.walk, first, len(flight.log) - 1,
        {b: c.summary() for b, c in clusters.items()}, estimates, replays=inputs,
    )


def run_searching_stage(
    flight: Flight,
    graph: MultiLayerGridGraph,
    ground: MultiLayerGridGraph,
    stage: int,
    not_found: Sequence[str],
    estimates: Mapping[str, BeaconEstimate],
) -> StageResult:
    """Fly the shortest Steiner branch toward unfound targets with anchors and detours."""
    cfg = flight.cfg
    ids = [t for t in not_found if t in estimates]
    if not ids:
        raise ValueError("searching stage needs at least one unfound target with an estimate")
    flight.stage = stage
    first = len(flight.log)
    proj = {t: project_to_ground(Vec3(*estimates[t].mu), ground).node for t in ids}
    root = project_to_ground(flight.nominal, ground).node
    anchor_nodes = {project_to_ground(p, ground).node for _, p in flight.anchors}
    tree = steiner_tree(ground, set(proj.values()) | anchor_nodes, root)
    branch = shortest_branch(tree, ground, leaves=set(proj.values()))
    steps = densify(branch.points, cfg.step_length)
    schedule = anchor_schedule(Walk(tuple(steps)), cfg.anchor_spacing, [p for _, p in flight.anchors])
    drop_at = set(schedule.step_indices)
    detours: dict[Node, list[str]] = {}
    for t in ids:
        detours.setdefault(proj[t], []).append(t)
    n_anchor_before = len(flight.anchors)

    try:
        flight.align_xy(steps[0])
        for k, p in enumerate(steps):
            if k > 0:
                flight.step_to(p)
            if k in drop_at:
                flight.deploy_anchor()
            node = ground.node_at(p)
            for t in detours.pop(node, []) if node is not None else []:
                flight.align_xy(p)
                z = float(estimates[t].mu[2])
                loop = detour_walk(Vec3(*p), z, cfg.detour_side, (cfg.space.width, cfg.space.depth, cfg.space.height))
                flight.fly(loop.points[1:])
    except _BudgetExhausted:
        pass

    stage_records = flight.log[first:]
    counts = _found_counts(stage_records, ids, cfg.found_rssi_threshold)
    newly = tuple(t for t in ids if counts[t] >= cfg.n_th)
    clusters, replayed, inputs = flight.cluster_and_replay(graph, ids)
    return StageResult(
        stage, "searching", Walk(tuple(steps)), first, len(flight.log) - 1,
        {b: c.summary() for b, c in clusters.items()}, replayed, newly,
        tuple(flight.anchors[n_anchor_before:]), tuple(sorted(tree.nodes)), tuple(branch.nodes or ()),
        inputs,
    )


def run_mission(config: MissionConfig) -> MissionReport:
    """Exploring stage, then searching stages until every target is found or a cap is hit."""
    graph = discretize(config.space)
    ground = ground_graph(config.space, config.search_cell)
    flight = Flight(config)
    if not config.targets:
        return flight.report("lidaus", [], {}, (), "no_targets")
    stages = [run_exploring_stage(flight, graph)]
    estimates = dict(stages[0].estimates)
    found: set[str] = set()
    termination = None
    if flight.moves >= flight.step_cap:
        termination = "max_steps"
    else:
        try:
            flight.land_at_home()
        except _BudgetExhausted:
            termination = "max_steps"
    stage = 0
    while termination is None:
        not_found = [t for t in config.target_ids if t not in found]
        if not not_found:
            termination = "all_found"
            break
        if stage >= config.max_stages:
            termination = "max_stages"
            break
        if flight.moves >= flight.step_cap:
            termination = "max_steps"
            break
        if not any(t in estimates for t in not_found):
            termination = "no_estimates"
            break
        stage += 1
        res = run_searching_stage(flight, graph, ground, stage, not_found, estimates)
        stages.append(res)
        estimates.update(res.estimates)
        found.update(res.newly_found)
    return flight.report("lidaus", stages, estimates, found, termination, flight.filter.estimates("target"))


# ---------------------------------------------------------------------------
# baselines


def _in_bounds(space: SpaceSpec, p) -> bool:
    return space.contains(Vec3(*p))


def _crosses_obstacle(space: SpaceSpec, a, b) -> bool:
    return any(box.intersects_segment(Vec3(*a), Vec3(*b)) for box in space.obstacles)


def run_baseline_random(config: MissionConfig, max_steps: int | None = None) -> MissionReport:
    """Random axis-aligned steps with the live filter; no anchors, no replay."""
    cap = config.max_steps if max_steps is None else max_steps
    flight = Flight(config, step_cap=cap)
    rng = flight.sim.streams["baseline-walk"]  # planner randomness, not truth
    dirs = np.array([(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)], dtype=float)
    ids = config.target_ids
    counts = dict.fromkeys(ids, 0)
    found: set[str] = set()
    termination = "max_steps"
    if cap > 0:
        flight.observe_here()
    while flight.moves < cap:
        if ids and len(found) == len(ids):
            termination = "all_found"
            break
        cur = np.asarray(flight.nominal)
        for _ in range(1000):
            nxt = cur + dirs[int(rng.integers(6))] * config.step_length
            if _in_bounds(config.space, nxt) and not _crosses_obstacle(config.space, cur, nxt):
                break
        else:
            raise RuntimeError("random walk is boxed in")
        rec = flight.step_to(Vec3(*nxt))
        for b in ids:
            v = rec.rssi_medians.get(b)
            if v is not None and v > config.found_rssi_threshold:
                counts[b] += 1
                if counts[b] >= config.n_th:
                    found.add(b)
    else:
        if ids and len(found) == len(ids):
            termination = "all_found"
    live = flight.filter.estimates("target")
    return flight.report("random", [], live, found, termination, live)


def run_baseline_naive(config: MissionConfig, max_steps: int | None = None) -> MissionReport:
    """Figure-eight sweep per layer, then greedy flights to the nearest unfound estimate."""
    cap = config.max_steps if max_steps is None else max_steps
    flight = Flight(config, step_cap=cap)
    space = config.space
    ids = config.target_ids
    counts = dict.fromkeys(ids, 0)
    found: set[str] = set()
    tries = dict.fromkeys(ids, 0)

    def tally(rec):
        for b in ids:
            v = rec.rssi_medians.get(b)
            if v is not None and v > config.found_rssi_threshold:
                counts[b] += 1
                if counts[b] >= config.n_th:
                    found.add(b)

    termination = None
    try:
        if cap > 0:
            tally(flight.observe_here())
        for z in space.layer_heights:
            flight.fly([Vec3(0.0, 0.0, z)], tally)
            flight.fly(figure_eight_waypoints(space.width, space.depth, z)[1:], tally)
        while True:
            if ids and len(found) == len(ids):
                termination = "all_found"
                break
            ests = flight.filter.estimates("target")
            cand = [t for t in ids if t not in found and t in ests and tries[t] < config.naive_counter_limit]
            if not cand:
                termination = "counters_exhausted"
                break
            here = np.asarray(flight.nominal)
            t = min(cand, key=lambda b: (float(np.linalg.norm(ests[b].mu - here)), b))
            tries[t] += 1
            goal = np.clip(ests[t].mu, [0.0, 0.0, 0.0], [space.width, space.depth, space.height])
            flight.fly(manhattan_route(flight.nominal, Vec3(*goal), "xyz")[1:], tally)
    except _BudgetExhausted:
        termination = "max_steps"
    live = flight.filter.estimates("target")
    return flight.report("naive", [], live, found, termination or "max_steps", live)


# ---------------------------------------------------------------------------
# fixed-route runs (ablations)


def run_route_mission(config: MissionConfig) -> MissionReport:
    """Fly ``config.route`` once, dropping anchors every ``anchor_spacing`` metres.

    ``estimates`` are the live filter's; when ``replay_threshold`` is set,
    ``stages[0].estimates`` additionally holds a replay of each target over the
    points where its RSSI reaches that threshold.
    """
    if config.route is None:
        raise ValueError("route mission needs a route")
    flight = Flight(config)
    start = config.route[0]
    if Vec3(*start) != flight.nominal:
        flight.nominal = Vec3(*start)
        flight.filter.reset_pose(start[:2])
    steps = densify(config.route, config.step_length)
    schedule = anchor_schedule(Walk(tuple(steps)), config.anchor_spacing)
    drop_at = set(schedule.step_indices)
    termination = "route_done"
    try:
        for k, p in enumerate(steps):
            if k == 0:
                flight.observe_here()
            else:
                flight.step_to(p)
            if k in drop_at:
                flight.deploy_anchor()
    except _BudgetExhausted:
        termination = "max_steps"
    live = flight.filter.estimates("target")
    replayed, inputs = {}, {}
    if config.replay_threshold is not None:
        replayed, inputs = threshold_replay(flight.log, config.target_ids, config.replay_threshold, config)
    stage = StageResult(0, "route", Walk(tuple(steps)), 0, len(flight.log) - 1, {}, replayed, replays=inputs)
    report = flight.report("route", [stage], live, (), termination, live)
    if config.replay_threshold is not None:
        report.replay_metrics = flight.evaluate(replayed)
    return report


def threshold_replay(
    log: Sequence[ObservationRecord], ids: Sequence[str], threshold: float, config: MissionConfig
) -> tuple[dict[str, BeaconEstimate], dict]:
    """Replay each beacon over the records whose RSSI is at or above ``threshold``.

    Returns the estimates and, per beacon, the (step indices, prior) replayed.
    """
    out, inputs = {}, {}
    for b in ids:
        pts = [r for r in log if r.rssi_medians.get(b, -math.inf) >= threshold]
        if not pts:
            continue
        pos = np.array([r.pose_estimate_at_record for r in pts], dtype=float)
        init = selection_init(pos)
        steps = tuple(r.step_index for r in pts)
        out[b] = replay(
            log, b, steps, init, config.params, config.noise.rssi_std, config.samples_per_point,
            z_bounds=replay_bounds(config),
        )
        inputs[b] = (steps, init)
    return out, inputs


def replay_bounds(config: MissionConfig) -> tuple[float, float]:
    return (config.space.layer_heights[0], config.space.height)


def run_method(config: MissionConfig, method: str) -> MissionReport:
    if method == "lidaus":
        return run_mission(config)
    if method == "naive":
        return run_baseline_naive(config)
    if method == "random":
        return run_baseline_random(config)
    if method == "route":
        return run_route_mission(config)
    raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


def threshold_for_distance(params: PathLossParams, d: float) -> float:
    return float(expected_rssi(params, d))
