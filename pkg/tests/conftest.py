import os

os.environ.setdefault("EVMC_THREADS", "0")

import numpy as np
import pytest

from evmc.events import CameraIntrinsics, StereoRig
from evmc.synth import gen_constant_flow


@pytest.fixture
def camera():
    return CameraIntrinsics.centered(200.0, 48, 48)


@pytest.fixture
def rig(camera):
    return StereoRig(camera, camera, 0.1)


@pytest.fixture
def flow_scene():
    """Small noise-free constant-flow slice with its ground truth."""
    return gen_constant_flow(20, 20, (1.0, -0.5), B=9, H=48, W=48, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE = {}


@pytest.fixture
def acceptance(capsys):
    """Record and print one PASS/FAIL line for a numbered acceptance criterion."""

    def record(n, ok, detail):
        line = f"ACC{n} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE[n] = line
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
