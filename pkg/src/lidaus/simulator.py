"""Ground-truth world: the true UAV pose, beacon positions, and sensor synthesis.

Nothing outside this module and the metrics code reads true positions; the
estimator only sees motion commands, height readings and RSSI medians.
"""

from __future__ import annotations

import inspect
from typing import Sequence

import numpy as np

from lidaus.rng import RngStreams
from lidaus.signal import NoiseSpec, PathLossParams, expected_rssi, lower_median
from lidaus.uslam import MotionCommand
from lidaus.world import Beacon, SpaceSpec, Vec3

MIN_DISTANCE = 0.01

# modules allowed to read ground truth
TRUTH_READERS = frozenset({"lidaus.simulator", "lidaus.metrics"})


class Simulator:
    def __init__(
        self,
        space: SpaceSpec,
        beacons: Sequence[Beacon],
        params: PathLossParams,
        noise: NoiseSpec,
        seed: int,
        samples_per_point: int = 1,
        rssi_floor: float | None = None,
    ):
        self.space = space
        self.params = params
        self.noise = noise
        self.samples_per_point = int(samples_per_point)
        self.rssi_floor = rssi_floor
        self.streams = RngStreams(seed)
        self._pose = np.array([0.0, 0.0, space.layer_heights[0]])
        self._beacons: dict[str, Beacon] = {}
        self._order: list[str] = []
        for b in beacons:
            self._add(b)

    def _add(self, b: Beacon) -> None:
        if b.id in self._beacons:
            raise ValueError(f"duplicate beacon id {b.id!r}")
        self._beacons[b.id] = b
        self._order.append(b.id)

    @property
    def beacon_ids(self) -> list[str]:
        return list(self._order)

    def kind(self, beacon_id: str) -> str:
        return self._beacons[beacon_id].kind

    def move(self, u: MotionCommand, nominal_z: float) -> float:
        """Apply one motion command and return the height sensor reading.

        Planar motion accumulates Gaussian error; altitude is held around the
        commanded height with independent error every step.
        """
        rng = self.streams["motion"]
        exy = rng.normal(0.0, 1.0, size=2) * self.noise.motion_std_xy
        ez = rng.normal(0.0, 1.0) * self.noise.motion_std_z
        eh = self.streams["height"].normal(0.0, 1.0) * self.noise.height_sensor_std
        if u.dx != 0.0 or u.dy != 0.0:
            self._pose[:2] += np.array([u.dx, u.dy]) + exy
        self._pose[2] = min(max(nominal_z + ez, 0.0), self.space.height)
        return float(self._pose[2] + eh)

    def observe(self) -> dict[str, float]:
        """Lower-median RSSI per beacon over ``samples_per_point`` draws."""
        out = {}
        for bid in self._order:
            b = self._beacons[bid]
            d = max(float(np.linalg.norm(np.asarray(b.true_position) - self._pose)), MIN_DISTANCE)
            mean = expected_rssi(b.params, d)
            std = self.noise.std_for(b.kind)
            rng = self.streams[f"rssi:{bid}"]
            draws = mean + rng.normal(0.0, 1.0, size=self.samples_per_point) * std
            med = lower_median(draws)
            if self.rssi_floor is not None and med < self.rssi_floor:
                continue
            out[bid] = med
        return out

    def deploy_anchor(self, anchor_id: str) -> None:
        """Drop an anchor on the floor directly below the true UAV position."""
        pos = Vec3(float(self._pose[0]), float(self._pose[1]), self.space.layer_heights[0])
        self._add(Beacon(anchor_id, "anchor", pos, self.params))

    def land_at_home(self) -> None:
        """Touch down on the home pad, which puts the UAV exactly at the origin."""
        self._pose[:] = (0.0, 0.0, self.space.layer_heights[0])

    # -- ground truth (metrics and tests only) -------------------------------

    def true_pose(self) -> Vec3:
        _check_caller()
        return Vec3(*map(float, self._pose))

    def true_position(self, beacon_id: str) -> Vec3:
        _check_caller()
        return self._beacons[beacon_id].true_position


def _check_caller() -> None:
    frame = inspect.currentframe()
    caller = frame.f_back.f_back if frame and frame.f_back else None
    name = caller.f_globals.get("__name__", "") if caller else ""
    if name.startswith("lidaus.") and name not in TRUTH_READERS:
        raise PermissionError(f"module {name} may not read ground truth")
