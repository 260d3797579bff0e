import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from matrixkit.geometry import Camera, look_at, random_rotation

torch.set_num_threads(1)
settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_camera(rng, resolution=(32, 24), focal=None):
    w, h = resolution
    R = random_rotation(rng)
    t = rng.normal(size=3)
    f = focal if focal is not None else rng.uniform(0.5, 2.0) * w
    pp = np.array([w / 2.0, h / 2.0]) + rng.uniform(-0.2, 0.2, 2) * np.array([w, h])
    return Camera(R, t, f, pp, resolution)


def ring_cameras(n, radius=2.0, height=0.5, resolution=(32, 32), focal=30.0):
    cams = []
    for k in range(n):
        a = 2 * np.pi * k / n
        c = np.array([radius * np.cos(a), radius * np.sin(a), height])
        R, t = look_at(c)
        cams.append(Camera(R, t, focal, np.array([resolution[0] / 2, resolution[1] / 2]), resolution))
    return cams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def report(number, ok, detail):
    """Record one acceptance line; the summary is printed at the end of the run."""
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
