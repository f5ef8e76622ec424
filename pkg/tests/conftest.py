import numpy as np
import pytest

from sparsetooth.camera import default_cameras, render
from sparsetooth.synthgen import JawConfig, generate_jaw


@pytest.fixture(scope="session")
def default_scan():
    return generate_jaw(JawConfig(seed=7))


@pytest.fixture(scope="session")
def default_view(default_scan):
    cam = default_cameras(default_scan, 1)[0]
    return render(default_scan, cam, splat_radius=1)


@pytest.fixture
def small_scan():
    return generate_jaw(JawConfig(num_teeth=4, points_per_tooth=12, gingiva_points=30,
                                  arch_radius=12.0, seed=3))


def perfect_logits(scan, margin=8.0):
    logits = np.zeros((scan.num_points, scan.num_classes))
    logits[np.arange(scan.num_points), scan.class_labels] = margin
    return logits


CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, ok, detail)``."""

    def record(number, ok, detail):
        CRITERIA[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
