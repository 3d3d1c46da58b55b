"""Scenario files: YAML <-> MissionConfig with line-numbered diagnostics.

Layout (every section except ``space`` and ``targets`` is optional)::

    name: free text
    space: {width, depth, height, layer_heights, cell_side, obstacles, vertical_columns}
    path_loss: {alpha, beta}
    noise: {rssi_std, anchor_rssi_std, motion_std_xy, motion_std_z, height_sensor_std}
    targets: [{id, position: [x, y, z]}, ...]   # or {count, seed}
    mission: {n_particles, anchor_spacing, found_rssi_threshold, ...}
    clustering: {r_dl_init, r_th_c_init, s_th, weights, max_iter}

``mission.route`` is a list of points or ``figure_eight``; ``mission.replay_threshold``
is a dBm value or ``{distance: metres}``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from lidaus.clustering import ClusteringParams
from lidaus.mission import MissionConfig, threshold_for_distance
from lidaus.planning import figure_eight_waypoints
from lidaus.rng import stream
from lidaus.signal import NoiseSpec, PathLossParams, distance_from_rssi
from lidaus.world import Beacon, Box, SpaceSpec, Vec3

FOUND_DISTANCE_TOL = 0.1


class ScenarioError(ValueError):
    """Invalid scenario; ``key`` is a dotted path and ``line`` is 1-based (or None)."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        self.key, self.line, self.detail = key, line, message
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


@dataclass
class _Loc:
    value: Any
    line: int | None


def _locate(node, loader) -> _Loc:
    line = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out = {}
        for k, v in node.value:
            key = loader.construct_object(k, deep=True)
            if not isinstance(key, str):
                raise ScenarioError(f"keys must be strings, got {key!r}", line=k.start_mark.line + 1)
            if key in out:
                raise ScenarioError(f"duplicate key: {key}", key, k.start_mark.line + 1)
            out[key] = _Loc(_locate(v, loader), k.start_mark.line + 1)
        return _Loc(out, line)
    if isinstance(node, yaml.SequenceNode):
        return _Loc([_locate(v, loader) for v in node.value], line)
    return _Loc(loader.construct_object(node, deep=True), line)


class _Section:
    """A mapping being consumed key by key; leftovers are reported as unknown."""

    def __init__(self, loc: _Loc, path: str):
        if not isinstance(loc.value, dict):
            raise ScenarioError(f"{path or 'scenario'} must be a mapping", path or None, loc.line)
        self.items: dict[str, _Loc] = loc.value
        self.path = path
        self.line = loc.line
        self.used: set[str] = set()

    def key(self, k: str) -> str:
        return f"{self.path}.{k}" if self.path else k

    def has(self, k: str) -> bool:
        return k in self.items

    def line_of(self, k: str) -> int | None:
        return self.items[k].line if k in self.items else self.line

    def raw(self, k: str) -> _Loc:
        self.used.add(k)
        return self.items[k].value

    def get(self, k: str, conv: Callable[[Any, str, int | None], Any], default=..., required=False):
        if k not in self.items:
            if required or default is ...:
                raise ScenarioError(f"missing key: {self.key(k)}", self.key(k), self.line)
            return default
        loc = self.raw(k)
        return conv(loc, self.key(k), self.items[k].line)

    def section(self, k: str) -> "_Section | None":
        if k not in self.items:
            return None
        return _Section(self.raw(k), self.key(k))

    def finish(self) -> None:
        for k in self.items:
            if k not in self.used:
                raise ScenarioError(f"unknown key: {self.key(k)}", self.key(k), self.items[k].line)


# -- scalar converters ----------------------------------------------------------


def _num(loc: _Loc, key: str, line) -> float:
    v = loc.value
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ScenarioError(f"{key} must be a number, got {v!r}", key, loc.line)
    return float(v)


def _int(loc: _Loc, key: str, line) -> int:
    v = loc.value
    if isinstance(v, bool) or not isinstance(v, int):
        raise ScenarioError(f"{key} must be an integer, got {v!r}", key, loc.line)
    return v


def _str(loc: _Loc, key: str, line) -> str:
    if not isinstance(loc.value, str):
        raise ScenarioError(f"{key} must be a string, got {loc.value!r}", key, loc.line)
    return loc.value


def _opt(conv):
    def f(loc: _Loc, key: str, line):
        if loc.value is None or (isinstance(loc.value, str) and loc.value.lower() == "none"):
            return None
        return conv(loc, key, line)

    return f


def _list(conv, length: int | None = None):
    def f(loc: _Loc, key: str, line):
        if not isinstance(loc.value, list):
            raise ScenarioError(f"{key} must be a list", key, loc.line)
        if length is not None and len(loc.value) != length:
            raise ScenarioError(f"{key} must have {length} entries, got {len(loc.value)}", key, loc.line)
        return [conv(v, f"{key}[{i}]", v.line) for i, v in enumerate(loc.value)]

    return f


_point = _list(_num, 3)


# -- sections -----------------------------------------------------------------


def _space(s: _Section) -> SpaceSpec:
    obstacles = []
    if s.has("obstacles"):
        items = s.raw("obstacles")
        if items.value is not None:
            if not isinstance(items.value, list):
                raise ScenarioError("space.obstacles must be a list", "space.obstacles", items.line)
            for i, it in enumerate(items.value):
                o = _Section(it, f"space.obstacles[{i}]")
                lo, hi = o.get("lo", _point, required=True), o.get("hi", _point, required=True)
                o.finish()
                try:
                    obstacles.append(Box(Vec3(*lo), Vec3(*hi)))
                except ValueError as e:
                    raise ScenarioError(str(e), o.path, o.line) from None
    columns = s.get("vertical_columns", _list(_list(_int, 2)), default=[])
    try:
        spec = SpaceSpec(
            width=s.get("width", _num, required=True),
            depth=s.get("depth", _num, required=True),
            height=s.get("height", _num, required=True),
            layer_heights=tuple(s.get("layer_heights", _list(_num), required=True)),
            cell_side=s.get("cell_side", _num, required=True),
            obstacles=tuple(obstacles),
            vertical_columns=tuple(tuple(c) for c in columns),
        )
    except ValueError as e:
        if isinstance(e, ScenarioError):
            raise
        raise ScenarioError(str(e), "space", s.line) from None
    s.finish()
    return spec


def generate_targets(space: SpaceSpec, count: int, seed: int, params: PathLossParams) -> tuple[Beacon, ...]:
    """``count`` targets uniform over the space, rounded to 0.1 m, ids T0, T1, ..."""
    rng = stream(seed, "scenario-targets")
    hi = np.array([space.width, space.depth, space.height])
    pos = np.round(rng.uniform(0.0, 1.0, size=(count, 3)) * hi, 1)
    pos = np.minimum(pos, hi)
    return tuple(Beacon(f"T{i}", "target", Vec3(*map(float, p)), params) for i, p in enumerate(pos))


def _targets(root: _Section, space: SpaceSpec, params: PathLossParams) -> tuple[Beacon, ...]:
    loc = root.raw("targets")
    if isinstance(loc.value, dict):
        g = _Section(loc, "targets")
        count = g.get("count", _int, required=True)
        seed = g.get("seed", _int, default=0)
        g.finish()
        if count < 0:
            raise ScenarioError("targets.count must be >= 0", "targets.count", g.line_of("count"))
        return generate_targets(space, count, seed, params)
    if loc.value is None:
        return ()
    if not isinstance(loc.value, list):
        raise ScenarioError("targets must be a list or a {count, seed} generator", "targets", loc.line)
    out, seen = [], set()
    for i, it in enumerate(loc.value):
        t = _Section(it, f"targets[{i}]")
        bid = t.get("id", _str, required=True)
        pos = Vec3(*t.get("position", _point, required=True))
        t.finish()
        if bid in seen:
            raise ScenarioError(f"duplicate target id {bid!r}", f"targets[{i}].id", t.line_of("id"))
        if not space.contains(pos):
            raise ScenarioError(f"target {bid} at {tuple(pos)} lies outside the space", f"targets[{i}].position", t.line_of("position"))
        seen.add(bid)
        out.append(Beacon(bid, "target", pos, params))
    return tuple(out)


_MISSION_FIELDS: dict[str, Callable] = {
    "n_particles": _int,
    "anchor_spacing": _opt(_num),
    "found_rssi_threshold": _num,
    "found_distance": _opt(_num),
    "n_th": _int,
    "max_stages": _int,
    "max_steps": _int,
    "step_length": _num,
    "samples_per_point": _int,
    "seed": _int,
    "detour_side": _num,
    "search_cell": _num,
    "naive_counter_limit": _int,
    "align_tolerance": _num,
    "rssi_floor": _opt(_num),
}


def _route(loc: _Loc, key: str, line, space: SpaceSpec):
    if loc.value is None:
        return None
    if loc.value == "figure_eight":
        return tuple(figure_eight_waypoints(space.width, space.depth, space.layer_heights[0]))
    if isinstance(loc.value, str):
        raise ScenarioError(f"{key} must be a list of points or 'figure_eight'", key, loc.line)
    pts = _list(_point)(loc, key, line)
    if len(pts) < 2:
        raise ScenarioError(f"{key} needs at least two points", key, loc.line)
    return tuple(Vec3(*p) for p in pts)


def _replay_threshold(loc: _Loc, key: str, line, params: PathLossParams):
    if isinstance(loc.value, dict):
        s = _Section(loc, key)
        d = s.get("distance", _num, required=True)
        s.finish()
        if not d > 0:
            raise ScenarioError(f"{key}.distance must be positive", f"{key}.distance", s.line_of("distance"))
        return threshold_for_distance(params, d)
    return _opt(_num)(loc, key, line)


def _check(cond: bool, msg: str, key: str, line) -> None:
    if not cond:
        raise ScenarioError(msg, key, line)


def config_from_document(loc: _Loc | None) -> MissionConfig:
    if loc is None or loc.value is None:
        raise ScenarioError("missing key: space", "space", None)
    root = _Section(loc, "")
    for k in ("space", "targets"):
        if not root.has(k):
            raise ScenarioError(f"missing key: {k}", k, None)
    root.get("name", _str, default=None)
    root.get("description", _str, default=None)
    space = _space(root.section("space"))

    params = PathLossParams()
    pl = root.section("path_loss")
    if pl is not None:
        alpha, beta = pl.get("alpha", _num, default=params.alpha), pl.get("beta", _num, default=params.beta)
        pl.finish()
        _check(alpha > 0, "path_loss.alpha must be positive", "path_loss.alpha", pl.line_of("alpha"))
        params = PathLossParams(alpha, beta)

    noise_kw = {}
    ns = root.section("noise")
    if ns is not None:
        for k in ("rssi_std", "motion_std_xy", "motion_std_z", "height_sensor_std"):
            if ns.has(k):
                noise_kw[k] = ns.get(k, _num)
                _check(noise_kw[k] >= 0, f"noise.{k} must be non-negative", f"noise.{k}", ns.line_of(k))
        if ns.has("anchor_rssi_std"):
            noise_kw["anchor_rssi_std"] = ns.get("anchor_rssi_std", _opt(_num))
            v = noise_kw["anchor_rssi_std"]
            _check(v is None or v >= 0, "noise.anchor_rssi_std must be non-negative", "noise.anchor_rssi_std", ns.line_of("anchor_rssi_std"))
        ns.finish()
    noise = NoiseSpec(**noise_kw)

    targets = _targets(root, space, params)

    cl_kw = {}
    cs = root.section("clustering")
    if cs is not None:
        for k, conv in (("r_dl_init", _num), ("r_th_c_init", _opt(_num)), ("s_th", _num), ("max_iter", _int)):
            if cs.has(k):
                cl_kw[k] = cs.get(k, conv)
        if cs.has("weights"):
            cl_kw["weights"] = tuple(cs.get("weights", _list(_num, 3)))
        try:
            clustering = ClusteringParams(**cl_kw)
        except ValueError as e:
            raise ScenarioError(str(e), "clustering", cs.line) from None
        cs.finish()
    else:
        clustering = ClusteringParams()

    kw: dict[str, Any] = {}
    ms = root.section("mission")
    if ms is not None:
        for k, conv in _MISSION_FIELDS.items():
            if ms.has(k):
                kw[k] = ms.get(k, conv)
        if ms.has("route"):
            kw["route"] = _route(ms.raw("route"), "mission.route", ms.line_of("route"), space)
        if ms.has("replay_threshold"):
            kw["replay_threshold"] = _replay_threshold(ms.raw("replay_threshold"), "mission.replay_threshold", ms.line_of("replay_threshold"), params)
        ms.finish()
        line = ms.line_of
    else:
        line = lambda k: None  # noqa: E731
    root.finish()

    fd = kw.get("found_distance")
    if fd is not None:
        thr = kw.get("found_rssi_threshold", MissionConfig.found_rssi_threshold)
        d = float(distance_from_rssi(params, thr))
        _check(
            abs(d - fd) <= FOUND_DISTANCE_TOL,
            f"found_rssi_threshold {thr} dBm maps to {d:.3f} m under alpha={params.alpha}, beta={params.beta}, "
            f"not the declared found_distance {fd} m",
            "mission.found_distance", line("found_distance"),
        )
    for k in ("n_particles", "n_th", "samples_per_point", "naive_counter_limit"):
        if k in kw:
            _check(kw[k] >= 1, f"mission.{k} must be >= 1", f"mission.{k}", line(k))
    for k in ("max_stages", "max_steps", "seed"):
        if k in kw:
            _check(kw[k] >= 0, f"mission.{k} must be >= 0", f"mission.{k}", line(k))
    for k in ("step_length", "detour_side", "search_cell", "anchor_spacing"):
        if kw.get(k) is not None:
            _check(kw[k] > 0, f"mission.{k} must be positive", f"mission.{k}", line(k))
    if "search_cell" in kw:
        for name in ("width", "depth"):
            n = getattr(space, name) / kw["search_cell"]
            _check(abs(n - round(n)) < 1e-9, f"mission.search_cell must divide space.{name}", "mission.search_cell", line("search_cell"))
    try:
        return MissionConfig(space, targets, params, noise, clustering=clustering, **kw)
    except ValueError as e:
        raise ScenarioError(str(e), "mission", ms.line if ms else None) from None


def parse_scenario_text(text: str) -> MissionConfig:
    loader = yaml.SafeLoader(text)
    try:
        node = loader.get_single_node()
        loc = None if node is None else _locate(node, loader)
    except yaml.MarkedYAMLError as e:
        mark = e.problem_mark or e.context_mark
        raise ScenarioError(f"malformed YAML: {e.problem}", None, mark.line + 1 if mark else None) from None
    finally:
        loader.dispose()
    return config_from_document(loc)


def parse_scenario(path: str | Path) -> MissionConfig:
    """Load and validate a scenario file, or a shipped scenario by bare name."""
    p = Path(path)
    if not p.exists():
        shipped = shipped_scenario(str(path))
        if shipped is None:
            raise FileNotFoundError(f"no scenario file {path}")
        return parse_scenario_text(shipped)
    return parse_scenario_text(p.read_text(encoding="utf-8"))


def shipped_scenarios() -> list[str]:
    root = resources.files("lidaus") / "scenarios"
    return sorted(f.name[:-5] for f in root.iterdir() if f.name.endswith(".yaml"))


def shipped_scenario(name: str) -> str | None:
    name = name.removeprefix("scenarios/").removesuffix(".yaml")
    f = resources.files("lidaus") / "scenarios" / f"{name}.yaml"
    return f.read_text(encoding="utf-8") if f.is_file() else None


# -- serialisation --------------------------------------------------------------


def _f(v):
    return None if v is None else float(v)


def _fl(values) -> list:
    return [float(v) for v in values]


def config_to_dict(cfg: MissionConfig) -> dict:
    """Plain-data form of ``cfg``; parsing its YAML dump gives back an equal config.

    Real-valued fields are always floats so the hash does not depend on whether
    a value was written as ``10`` or ``10.0``.
    """
    sp = cfg.space
    c = cfg.clustering
    return {
        "space": {
            "width": float(sp.width),
            "depth": float(sp.depth),
            "height": float(sp.height),
            "layer_heights": _fl(sp.layer_heights),
            "cell_side": float(sp.cell_side),
            "obstacles": [{"lo": _fl(b.lo), "hi": _fl(b.hi)} for b in sp.obstacles],
            "vertical_columns": [[int(v) for v in c_] for c_ in sp.vertical_columns],
        },
        "path_loss": {"alpha": float(cfg.params.alpha), "beta": float(cfg.params.beta)},
        "noise": {
            "rssi_std": float(cfg.noise.rssi_std),
            "anchor_rssi_std": _f(cfg.noise.anchor_rssi_std),
            "motion_std_xy": float(cfg.noise.motion_std_xy),
            "motion_std_z": float(cfg.noise.motion_std_z),
            "height_sensor_std": float(cfg.noise.height_sensor_std),
        },
        "targets": [{"id": b.id, "position": _fl(b.true_position)} for b in cfg.targets],
        "mission": {
            **{k: _f(getattr(cfg, k)) if conv is not _int else int(getattr(cfg, k)) for k, conv in _MISSION_FIELDS.items()},
            "route": None if cfg.route is None else [_fl(p) for p in cfg.route],
            "replay_threshold": _f(cfg.replay_threshold),
        },
        "clustering": {
            "r_dl_init": float(c.r_dl_init),
            "r_th_c_init": _f(c.r_th_c_init),
            "s_th": float(c.s_th),
            "weights": _fl(c.weights),
            "max_iter": int(c.max_iter),
        },
    }


def dump_scenario(cfg: MissionConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg: MissionConfig) -> str:
    return hashlib.sha256(canonical_json(config_to_dict(cfg)).encode("utf-8")).hexdigest()
