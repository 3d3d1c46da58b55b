import numpy as np
import pytest

from lidaus.signal import NoiseSpec, PathLossParams
from lidaus.mission import MissionConfig
from lidaus.world import Beacon, SpaceSpec, Vec3, discretize

# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE: list[tuple[str, bool, str]] = []


def report_criterion(name: str, passed: bool, detail: str = "") -> None:
    line = f"{'PASS' if passed else 'FAIL'} {name}" + (f" :: {detail}" if detail else "")
    print(line)
    ACCEPTANCE.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {name}" + (f" :: {detail}" if detail else ""))


def grid(nx_cells: int, ny_cells: int, cell: float = 1.0, layers=(0.0,), height: float | None = None, **kw):
    """Graph over an ``nx_cells`` by ``ny_cells`` floor."""
    h = max(layers) if height is None else height
    spec = SpaceSpec(nx_cells * cell, ny_cells * cell, h, tuple(layers), cell, **kw)
    return discretize(spec)


def target(bid, x, y, z, params=PathLossParams()):
    return Beacon(bid, "target", Vec3(x, y, z), params)


def small_config(**kw):
    """A 10 m two-layer mission with two targets that runs in well under a second."""
    base = dict(
        space=SpaceSpec(10, 10, 1, (0, 1), 5),
        targets=(target("T0", 7.2, 3.1, 0.4), target("T1", 2.5, 8.0, 0.8)),
        noise=NoiseSpec(rssi_std=0.1, motion_std_xy=0.02, motion_std_z=0.01, height_sensor_std=0.02),
        n_particles=30,
        samples_per_point=5,
        max_stages=3,
        max_steps=600,
        seed=4,
    )
    base.update(kw)
    return MissionConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def params():
    return PathLossParams()


@pytest.fixture
def quiet_noise():
    return NoiseSpec(rssi_std=0.0, motion_std_xy=0.0, motion_std_z=0.0, height_sensor_std=0.0)
