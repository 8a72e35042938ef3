import time

import numpy as np
import pytest

from multishot.camera import CameraExtrinsics, CameraIntrinsics, CameraPose

_acceptance_results = []
_session = {}
SUITE_BUDGET_SECONDS = 120.0


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def random_pose(rng: np.random.Generator, frame_index: int = 0) -> CameraPose:
    width = int(rng.integers(8, 1000))
    height = int(rng.integers(8, 1000))
    intr = CameraIntrinsics(
        fx=float(rng.uniform(10, 2000)), fy=float(rng.uniform(10, 2000)),
        cx=float(rng.uniform(0, width)), cy=float(rng.uniform(0, height)),
        width=width, height=height,
    )
    ext = CameraExtrinsics(random_rotation(rng), rng.uniform(-10, 10, 3))
    return CameraPose(intr, ext, frame_index)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_intrinsics():
    return CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=4, height=4)


def pytest_runtest_logreport(report):
    if report.when == "call" and "test_acceptance.py" in report.nodeid:
        _acceptance_results.append((report.nodeid.split("::")[-1], report.outcome))


def pytest_sessionstart(session):
    _session["start"] = time.perf_counter()


@pytest.hookimpl(tryfirst=True)
def pytest_sessionfinish(session, exitstatus):
    elapsed = time.perf_counter() - _session["start"]
    _session["elapsed"] = elapsed
    if elapsed >= SUITE_BUDGET_SECONDS and exitstatus == 0:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance_results:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")
    elapsed = _session.get("elapsed", time.perf_counter() - _session["start"])
    ok = elapsed < SUITE_BUDGET_SECONDS
    terminalreporter.write_line(
        f"{'PASS' if ok else 'FAIL'}  suite_wall_time ({elapsed:.1f} s, budget {SUITE_BUDGET_SECONDS:.0f} s)"
    )
