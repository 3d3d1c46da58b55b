"""Line-delimited JSON run logs with a tamper-evident trailer.

One JSON object per line, in this order:

1. ``{"kind": "header", "format", "version", "method", "seed", "config_hash", "config"}``
2. ``{"kind": "record", ...}`` per observation, interleaved with
   ``{"kind": "stage", ...}`` markers written right after a stage's last record
3. ``{"kind": "trailer", "records": n, "sha256": hex}`` where the digest covers
   every preceding byte of the file

Stage markers carry, per replayed beacon, the step indices, prior and resulting
estimate, so :func:`verify_replays` can re-run the replay and compare bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from lidaus import __version__
from lidaus.mission import MissionConfig, MissionReport, replay_bounds
from lidaus.scenario import canonical_json, config_from_document, config_hash, config_to_dict, _Loc
from lidaus.uslam import BeaconEstimate, ObservationRecord, replay

FORMAT = "lidaus-runlog/1"


class RunLogError(ValueError):
    """Malformed, truncated or tampered run log."""


@dataclass
class StageMarker:
    index: int
    kind: str
    first_step: int
    last_step: int
    newly_found: tuple[str, ...] = ()
    anchors: tuple = ()
    # beacon -> (points, init, estimate)
    replays: dict[str, tuple[tuple[int, ...], BeaconEstimate, BeaconEstimate]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "kind": "stage",
            "index": self.index,
            "stage_kind": self.kind,
            "first_step": self.first_step,
            "last_step": self.last_step,
            "newly_found": list(self.newly_found),
            "anchors": [[a, list(p)] for a, p in self.anchors],
            "replays": {
                b: {"points": list(pts), "init": init.to_dict(), "estimate": est.to_dict()}
                for b, (pts, init, est) in sorted(self.replays.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StageMarker":
        return cls(
            int(d["index"]), d["stage_kind"], int(d["first_step"]), int(d["last_step"]),
            tuple(d.get("newly_found", ())), tuple((a, tuple(p)) for a, p in d.get("anchors", ())),
            {
                b: (tuple(v["points"]), BeaconEstimate.from_dict(v["init"]), BeaconEstimate.from_dict(v["estimate"]))
                for b, v in d.get("replays", {}).items()
            },
        )


@dataclass
class RunLog:
    config: MissionConfig
    method: str
    seed: int
    records: list[ObservationRecord]
    stages: list[StageMarker]
    config_hash: str
    version: str = __version__

    @classmethod
    def from_report(cls, report: MissionReport, config: MissionConfig) -> "RunLog":
        stages = []
        for s in report.stages:
            reps = {b: (tuple(pts), init, s.estimates[b]) for b, (pts, init) in s.replays.items()}
            stages.append(StageMarker(s.index, s.kind, s.first_step, s.last_step, s.newly_found, s.anchors, reps))
        return cls(config, report.method, report.seed, list(report.log), stages, config_hash(config))

    def lines(self) -> Iterator[str]:
        yield canonical_json({
            "kind": "header",
            "format": FORMAT,
            "version": self.version,
            "method": self.method,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "config": config_to_dict(self.config),
        })
        pending = sorted(self.stages, key=lambda s: (s.last_step, s.index))
        k = 0
        for rec in self.records:
            while k < len(pending) and pending[k].last_step < rec.step_index:
                yield canonical_json(pending[k].to_dict())
                k += 1
            yield canonical_json({"kind": "record", **rec.to_dict()})
        for s in pending[k:]:
            yield canonical_json(s.to_dict())

    def dumps(self) -> str:
        body = "".join(line + "\n" for line in self.lines())
        digest = hashlib.sha256(body.encode("utf-8")).hexdigest()
        return body + canonical_json({"kind": "trailer", "records": len(self.records), "sha256": digest}) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")


def loads(text: str) -> RunLog:
    lines = text.splitlines(keepends=True)
    if not lines:
        raise RunLogError("empty run log")
    try:
        trailer = json.loads(lines[-1])
    except json.JSONDecodeError:
        raise RunLogError("run log is truncated: last line is not valid JSON") from None
    if trailer.get("kind") != "trailer":
        raise RunLogError("run log is truncated: no trailer")
    body = "".join(lines[:-1])
    if hashlib.sha256(body.encode("utf-8")).hexdigest() != trailer.get("sha256"):
        raise RunLogError("run log digest mismatch: contents were modified")
    objs = [json.loads(line) for line in lines[:-1]]
    if not objs or objs[0].get("kind") != "header":
        raise RunLogError("run log has no header")
    head = objs[0]
    if head.get("format") != FORMAT:
        raise RunLogError(f"unsupported run log format {head.get('format')!r}")
    cfg = config_from_document(_as_loc(head["config"]))
    if config_hash(cfg) != head.get("config_hash"):
        raise RunLogError("config hash in header does not match the embedded config")
    records, stages = [], []
    for o in objs[1:]:
        kind = o.get("kind")
        if kind == "record":
            records.append(ObservationRecord.from_dict(o))
        elif kind == "stage":
            stages.append(StageMarker.from_dict(o))
        else:
            raise RunLogError(f"unexpected line kind {kind!r}")
    if len(records) != trailer.get("records"):
        raise RunLogError("record count does not match trailer")
    return RunLog(cfg, head["method"], int(head["seed"]), records, stages, head["config_hash"], head.get("version", ""))


def load(path: str | Path) -> RunLog:
    return loads(Path(path).read_text(encoding="utf-8"))


def _as_loc(obj) -> _Loc:
    if isinstance(obj, dict):
        return _Loc({k: _Loc(_as_loc(v), None) for k, v in obj.items()}, None)
    if isinstance(obj, list):
        return _Loc([_as_loc(v) for v in obj], None)
    return _Loc(obj, None)


def replay_logged(log: RunLog, beacon_id: str, points, init: BeaconEstimate) -> BeaconEstimate:
    cfg = log.config
    return replay(
        log.records, beacon_id, points, init, cfg.params, cfg.noise.rssi_std, cfg.samples_per_point,
        z_bounds=replay_bounds(cfg),
    )


def verify_replays(log: RunLog) -> list[tuple[int, str, bool]]:
    """Re-run every logged replay; one ``(stage, beacon, bit_exact)`` row each."""
    out = []
    for s in log.stages:
        for b, (pts, init, est) in sorted(s.replays.items()):
            got = replay_logged(log, b, pts, init)
            same = np.array_equal(got.mu, est.mu) and np.array_equal(got.sigma, est.sigma)
            out.append((s.index, b, bool(same)))
    return out
