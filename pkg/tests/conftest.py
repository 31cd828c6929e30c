import os

import numpy as np
import pytest
from hypothesis import strategies as st

from vemocp.mesh import polygon_geometry, star_shape_radius


def random_polygon(rng: np.random.Generator, n: int | None = None, rmin: float = 0.55) -> np.ndarray:
    """Counter-clockwise polygon, star-shaped with respect to its centroid."""
    while True:
        nv = n if n is not None else int(rng.integers(3, 10))
        ang = np.sort(rng.uniform(0.0, 2 * np.pi, nv))
        gaps = np.diff(np.r_[ang, ang[0] + 2 * np.pi])
        if gaps.min() < 0.15 or gaps.max() > 0.85 * np.pi:
            continue
        r = rng.uniform(rmin, 1.0, nv)
        xy = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
        scale = rng.uniform(0.05, 3.0)
        xy = xy * scale + rng.uniform(-5.0, 5.0, 2)
        geom = polygon_geometry(xy)
        if star_shape_radius(geom) > 0.05 * geom.diameter:
            return xy


@st.composite
def polygons(draw, n=None):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_polygon(np.random.default_rng(seed), n)


UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
PENTAGON = np.array([[0.0, 0.0], [2.0, 0.1], [2.4, 1.3], [1.1, 2.0], [-0.3, 1.2]])
NONCONVEX = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.5, 0.8], [0.0, 1.0]])


@pytest.fixture(scope="session")
def reference_path(tmp_path_factory):
    """Prefix of the cached Test-2 reference solution (built on first use)."""
    from vemocp.experiments import reference_cache_path

    if os.environ.get("VEMOCP_CACHE"):
        return reference_cache_path()
    return reference_cache_path(tmp_path_factory.getbasetemp().parent / "vemocp-cache")


@pytest.fixture(scope="session")
def small_reference(tmp_path_factory):
    """A coarse Test-2 reference (40x20, k=2) saved under a temporary prefix."""
    from vemocp.experiments import build_reference

    ref = build_reference(resolution=(40, 20))
    prefix = tmp_path_factory.mktemp("ref") / "small"
    ref.save(prefix)
    return ref, prefix


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
