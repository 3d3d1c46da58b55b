"""Localization error metrics against ground truth (evaluation only)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from lidaus.world import Vec3


@dataclass(frozen=True)
class BeaconError:
    beacon_id: str
    error: float | None  # None when the beacon has no estimate
    ex: float | None = None
    ey: float | None = None
    ez: float | None = None

    @property
    def found(self) -> bool:
        return self.error is not None


@dataclass(frozen=True)
class Metrics:
    rows: tuple[BeaconError, ...]
    steps: int = 0
    anchors: int = 0

    @property
    def estimated(self) -> list[BeaconError]:
        return [r for r in self.rows if r.found]

    @property
    def n_unfound(self) -> int:
        return sum(1 for r in self.rows if not r.found)

    @property
    def mean_error(self) -> float:
        errs = [r.error for r in self.estimated]
        return float(np.mean(errs)) if errs else float("nan")

    @property
    def max_error(self) -> float:
        errs = [r.error for r in self.estimated]
        return float(np.max(errs)) if errs else float("nan")

    def error_of(self, beacon_id: str) -> float | None:
        for r in self.rows:
            if r.beacon_id == beacon_id:
                return r.error
        raise KeyError(beacon_id)

    def to_dict(self) -> dict:
        return {
            "mean_error": None if not self.estimated else self.mean_error,
            "max_error": None if not self.estimated else self.max_error,
            "unfound": self.n_unfound,
            "steps": self.steps,
            "anchors": self.anchors,
            "beacons": [
                {"id": r.beacon_id, "error": r.error, "ex": r.ex, "ey": r.ey, "ez": r.ez} for r in self.rows
            ],
        }


def compute_metrics(
    estimates: Mapping[str, Sequence[float]],
    ground_truth: Mapping[str, Vec3],
    steps: int = 0,
    anchors: int = 0,
) -> Metrics:
    """Euclidean and per-axis absolute errors for every ground-truth beacon.

    Beacons without an estimate are kept as "unfound" rows and excluded from
    the mean and max.
    """
    rows = []
    for bid in sorted(ground_truth):
        est = estimates.get(bid)
        if est is None:
            rows.append(BeaconError(bid, None))
            continue
        d = np.asarray(est, dtype=float) - np.asarray(ground_truth[bid], dtype=float)
        rows.append(BeaconError(bid, float(np.linalg.norm(d)), float(abs(d[0])), float(abs(d[1])), float(abs(d[2]))))
    return Metrics(tuple(rows), steps, anchors)


def ground_truth(sim, beacon_ids: Sequence[str]) -> dict[str, Vec3]:
    """Read true beacon positions from a simulator (permitted here only)."""
    return {b: sim.true_position(b) for b in beacon_ids}
