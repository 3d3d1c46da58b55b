"""Ground truth must stay inside the simulator and the metrics code."""

import ast
import types
from importlib import resources

import pytest

from lidaus import simulator
from lidaus.signal import NoiseSpec, PathLossParams
from lidaus.world import Beacon, SpaceSpec, Vec3

TRUTH_ATTRS = {"true_position", "true_pose", "_pose", "_beacons"}


def make_sim():
    b = Beacon("T0", "target", Vec3(1, 2, 0), PathLossParams())
    return simulator.Simulator(SpaceSpec(10, 10, 1, (0, 1), 5), [b], PathLossParams(), NoiseSpec(), 0)


class TestRuntimeGuard:
    @pytest.mark.parametrize("name", ["lidaus.uslam", "lidaus.planning", "lidaus.clustering", "lidaus.mission"])
    def test_estimator_modules_are_refused(self, name):
        mod = types.ModuleType(name)
        exec("def go(sim):\n    return sim.true_position('T0')\n", mod.__dict__)
        with pytest.raises(PermissionError, match=name):
            mod.go(make_sim())
        exec("def pose(sim):\n    return sim.true_pose()\n", mod.__dict__)
        with pytest.raises(PermissionError):
            mod.pose(make_sim())

    @pytest.mark.parametrize("name", sorted(simulator.TRUTH_READERS))
    def test_allowed_modules(self, name):
        mod = types.ModuleType(name)
        exec("def go(sim):\n    return sim.true_position('T0')\n", mod.__dict__)
        assert mod.go(make_sim()) == Vec3(1, 2, 0)

    def test_tests_may_read(self):
        assert make_sim().true_pose() == Vec3(0, 0, 0)


class TestStaticScan:
    @staticmethod
    def hits(name):
        src = (resources.files("lidaus") / f"{name}.py").read_text(encoding="utf-8")
        return [
            (node.attr, src.splitlines()[node.lineno - 1].strip())
            for node in ast.walk(ast.parse(src))
            if isinstance(node, ast.Attribute) and node.attr in TRUTH_ATTRS
        ]

    @pytest.mark.parametrize("name", ["uslam", "clustering", "planning", "signal"])
    def test_estimator_code_never_touches_truth(self, name):
        assert self.hits(name) == []

    @pytest.mark.parametrize("name", ["mission", "runlog", "cli", "export", "scenario"])
    def test_orchestration_reads_only_configured_targets(self, name):
        # the declared target list is part of the config; the simulator's state is not
        for attr, line in self.hits(name):
            assert attr == "true_position" and "b.true_position" in line and "sim" not in line, line
