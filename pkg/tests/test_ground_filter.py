import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ladarmover.ground_filter import GroundParams, classify_ground
from ladarmover.scan_geometry import PointCloud, project_frame
from ladarmover.simulator import Scene, render_frame

from conftest import make_cloud


def plane_points(rng, n=400, extent=10.0, noise=0.02):
    xy = rng.uniform(-extent, extent, (n, 2))
    return np.column_stack((xy, rng.normal(0.0, noise, n)))


def test_flat_plane_all_ground(rng):
    labels = classify_ground(make_cloud(plane_points(rng), sensor=(0, 0, 2)))
    assert labels.all()


def test_isolated_obstacle(rng):
    pts = np.vstack((plane_points(rng), [[1.0, 1.0, 2.0]]))
    labels = classify_ground(make_cloud(pts, sensor=(0, 0, 2)))
    assert not labels[-1]
    assert labels[:-1].all()


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        classify_ground(PointCloud(np.zeros((0, 3)), np.zeros(0)))


def test_params_validated():
    with pytest.raises(ValueError):
        GroundParams(cell_size=0)
    with pytest.raises(ValueError):
        GroundParams(max_tilt=np.pi / 2)


def test_steep_cell_not_ground():
    # a 45 degree slab tilts far past max_tilt, so no point in it is ground
    rng = np.random.default_rng(3)
    x = rng.uniform(0.1, 1.9, 200)
    y = rng.uniform(0.1, 1.9, 200)
    pts = np.column_stack((x, y, x))
    labels = classify_ground(make_cloud(pts, sensor=(-5, 0, 2)), GroundParams(neighbor_rings=0))
    assert not labels.any()


def test_ramp_with_box():
    scene = Scene.model_validate(dict(
        duration=1.0,
        ground=dict(ramps=[dict(x_start=5.0, x_end=40.0, angle_deg=5.0)]),
        sensor=dict(range_noise=0.0),
        objects=[dict(id=1, shape="box", size=[3.0, 2.0, 1.5], position=[18.0, 0.0])],
    ))
    frame, pose, truth = render_frame(scene, 0.0, seed=0)
    cloud = project_frame(frame, pose)
    is_ground = truth.labels[cloud.rows, cloud.cols] == 0
    labels = classify_ground(cloud)
    tp = np.sum(labels & is_ground)
    recall = tp / is_ground.sum()
    precision = tp / labels.sum()
    assert recall >= 0.99 and precision >= 0.99
    # box faces clear of the tolerance band are never ground
    above = cloud.xyz[:, 2] - scene.ground.height(cloud.xyz[:, 0]) > 2 * GroundParams().height_tolerance
    box = truth.labels[cloud.rows, cloud.cols] == 1
    assert (box & above).sum() > 50
    assert not labels[box & above].any()


def scattered_scene(seed):
    rng = np.random.default_rng(seed)
    ground = plane_points(rng, 300)
    poles = np.column_stack((rng.uniform(-8, 8, (4, 2)).repeat(15, axis=0), np.tile(np.linspace(0.3, 2.5, 15), 4)))
    return np.vstack((ground, poles))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_permutation_invariant(seed):
    pts = scattered_scene(seed)
    perm = np.random.default_rng(seed + 1).permutation(len(pts))
    a = classify_ground(make_cloud(pts, sensor=(0, 0, 2)))
    b = classify_ground(make_cloud(pts[perm], sensor=(0, 0, 2)))
    assert len(a) == len(pts)
    np.testing.assert_array_equal(a[perm], b)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(-5, 5), st.integers(-5, 5))
def test_cell_translation_invariant(seed, i, j):
    params = GroundParams()
    pts = scattered_scene(seed)
    shift = np.array([i * params.cell_size, j * params.cell_size, 0.0])
    a = classify_ground(make_cloud(pts, sensor=(0, 0, 2)), params)
    b = classify_ground(make_cloud(pts + shift, sensor=shift + [0, 0, 2]), params)
    np.testing.assert_array_equal(a, b)
