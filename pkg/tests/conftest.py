import numpy as np
import pytest

from ladarmover.clustering import ObjectCluster
from ladarmover.scan_geometry import PointCloud


def make_cloud(xyz, sensor=(0.0, 0.0, 0.0)) -> PointCloud:
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    return PointCloud(xyz, np.linalg.norm(xyz - np.asarray(sensor, dtype=float), axis=1))


def make_cluster(xyz, sensor=(0.0, 0.0, 0.0), cluster_id=0) -> ObjectCluster:
    return ObjectCluster(cluster_id, make_cloud(xyz, sensor), sensor_xy=tuple(sensor[:2]))


def box_surface(rng, n, size=(4.0, 2.0, 1.5), center=(0.0, 0.0)) -> np.ndarray:
    """Points scattered over the four sides and the top of a box standing on z=0."""
    half = np.array([size[0], size[1]]) / 2
    face = rng.integers(0, 5, n)
    xy = rng.uniform(-1.0, 1.0, (n, 2)) * half
    z = rng.uniform(0.0, size[2], n)
    axis, sign = face // 2, np.where(face % 2 == 0, 1.0, -1.0)
    side = face < 4
    xy[side, axis[side]] = sign[side] * half[axis[side]]
    z[~side] = size[2]
    return np.column_stack((xy + np.asarray(center, dtype=float), z))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance summary: one pass/fail line per criterion ------------------------------

_CRITERIA: list[tuple[str, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): an acceptance criterion, summarized after the run")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        _CRITERIA.append((mark.args[0], status, detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, status, detail in _CRITERIA:
        terminalreporter.write_line(f"{status}  {name}" + (f"  ({detail})" if detail else ""))
