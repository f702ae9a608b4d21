"""Reference scenes for the acceptance checks and the benchmark."""

from __future__ import annotations

import numpy as np

from .simulator import Scene

VEHICLE = [4.5, 1.8, 1.6]


def _vehicle(start_x: float, y: float, speed: float, duration: float) -> dict:
    return dict(
        id=1, shape="box", size=VEHICLE,
        trajectory=dict(start=[start_x, y, 0.0], segments=[dict(duration=duration, speed=speed)]),
    )


def _platform(duration: float, speed: float = 3.0) -> dict:
    return dict(trajectory=dict(segments=[dict(duration=duration, speed=speed)]))


def open_scene(frames: int = 200) -> Scene:
    """One vehicle at 5 m/s, three stationary trees, sensor driving at 3 m/s."""
    duration = frames / 10.0
    trees = [(2, 30.0, -8.0), (3, 45.0, 12.0), (4, 60.0, -10.0)]
    objects = [_vehicle(15.0, 8.0, 5.0, duration)]
    objects += [dict(id=i, shape="cylinder", radius=0.3, height=5.0, position=[x, y]) for i, x, y in trees]
    return Scene.model_validate(dict(duration=duration, sensor=_platform(duration), objects=objects))


def clutter_scene(layout_seed: int = 0, frames: int = 100, n_cylinders: int = 20, n_band: int = 6) -> Scene:
    """A vehicle driving behind a band of poles, with more poles scattered on both sides.

    ``n_band`` of the cylinders stand between the sensor path and the vehicle
    lane and occlude it intermittently; the rest sit beyond the lane or on the
    far side of the road.
    """
    rng = np.random.default_rng(layout_seed)
    rest = n_cylinders - n_band
    bx = np.sort(rng.uniform(15.0, 60.0, n_band))
    by = rng.uniform(3.0, 6.0, n_band)
    ox = rng.uniform(10.0, 70.0, rest)
    side = rng.integers(0, 2, rest)
    oy = np.where(side == 0, rng.uniform(-14.0, -3.0, rest), rng.uniform(12.0, 16.0, rest))
    xs = np.concatenate([bx, ox])
    ys = np.concatenate([by, oy])
    radii = rng.uniform(0.2, 0.5, n_cylinders)
    duration = frames / 10.0
    objects = [_vehicle(15.0, 9.0, 5.0, duration)]
    objects += [
        dict(id=10 + i, shape="cylinder", radius=float(r), height=4.0, position=[float(x), float(y)])
        for i, (x, y, r) in enumerate(zip(xs, ys, radii))
    ]
    return Scene.model_validate(dict(duration=duration, sensor=_platform(duration), objects=objects))


def two_mover_scene(frames: int = 100) -> Scene:
    """Two vehicles on opposite sides of the road, a few poles, sensor driving at 3 m/s."""
    duration = frames / 10.0
    objects = [
        _vehicle(15.0, 8.0, 5.0, duration),
        dict(
            id=2, shape="box", size=VEHICLE,
            trajectory=dict(start=[55.0, -8.0, 180.0], segments=[dict(duration=duration, speed=1.5)]),
        ),
    ]
    poles = [(10, 25.0, -14.0), (11, 35.0, 14.0), (12, 55.0, 15.0), (13, 65.0, -15.0)]
    objects += [dict(id=i, shape="cylinder", radius=0.3, height=4.0, position=[x, y]) for i, x, y in poles]
    return Scene.model_validate(dict(duration=duration, sensor=_platform(duration), objects=objects))
