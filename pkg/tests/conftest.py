import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from emitcast.geometry import OrientedFrame  # noqa: E402
from emitcast.sensor import SensorConfig  # noqa: E402

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one summary line; printed at the end of the session."""
    return _VERDICTS.append


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture
def identity():
    return OrientedFrame.identity()


@pytest.fixture
def demo4x8():
    """4 channels from -pi/2 in pi/4 steps, 8 rays from -pi in pi/4 steps."""
    return SensorConfig(origin=(0, 0, 0), frame=OrientedFrame.identity(), gamma_n=4, chi_n=8,
                        dtheta=math.pi / 4, dphi=math.pi / 4, theta0=-math.pi, phi0=-math.pi / 2)


def facing_triangle(center, size, rng, origin=(0.0, 0.0, 0.0)):
    """Random triangle near ``center`` wound so its front faces ``origin``."""
    c = np.asarray(center, dtype=np.float64)
    t = c + rng.normal(0.0, size, (3, 3))
    n = np.cross(t[1] - t[0], t[2] - t[0])
    if (t.mean(0) - np.asarray(origin)) @ n > 0:
        t = t[[0, 2, 1]]
    return t.astype(np.float32)


def random_triangles(rng, n, r_lo=2.0, r_hi=40.0, size=1.0, origin=(0.0, 0.0, 0.0)):
    out = np.empty((n, 3, 3), dtype=np.float32)
    for k in range(n):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        out[k] = facing_triangle(np.asarray(origin) + d * rng.uniform(r_lo, r_hi), size, rng, origin)
    return out
