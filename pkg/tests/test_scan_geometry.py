import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ladarmover.scan_geometry import (
    FrameFormatError,
    LadarFrame,
    SensorPose,
    beam_direction,
    beam_directions,
    project_frame,
    read_frames,
    rotation_matrix,
    write_frame,
    write_frames,
)

angles = st.floats(-np.pi, np.pi, allow_nan=False)


def single_beam(az=0.0, el=0.0, r=10.0):
    return LadarFrame(np.array([[r]]), az, 0.01, el, 0.01)


def test_beam_boresight():
    np.testing.assert_allclose(beam_direction(single_beam(), 0, 0), [1, 0, 0], atol=1e-15)


def test_beam_quarter_turn():
    np.testing.assert_allclose(beam_direction(single_beam(az=np.pi / 2), 0, 0), [0, 1, 0], atol=1e-15)


def test_beam_elevated():
    h = np.sqrt(2) / 2
    np.testing.assert_allclose(beam_direction(single_beam(el=np.pi / 4), 0, 0), [h, 0, h], atol=1e-15)


def test_beam_out_of_bounds():
    with pytest.raises(IndexError):
        beam_direction(single_beam(), 1, 0)
    with pytest.raises(IndexError):
        beam_direction(single_beam(), 0, -1)


def test_beam_directions_match_single():
    f = LadarFrame(np.ones((3, 5)), -0.3, 0.1, -0.2, 0.05)
    grid = beam_directions(f)
    for r in range(3):
        for c in range(5):
            np.testing.assert_allclose(grid[r, c], beam_direction(f, r, c), atol=1e-15)


def test_project_identity():
    cloud = project_frame(single_beam(), SensorPose((0, 0, 0)))
    np.testing.assert_allclose(cloud.xyz, [[10, 0, 0]], atol=1e-12)
    assert cloud.sensor_distance[0] == 10.0
    p = cloud[0]
    assert (p.grid_row, p.grid_col) == (0, 0)


def test_project_translated():
    cloud = project_frame(single_beam(), SensorPose((5, 0, 0)))
    np.testing.assert_allclose(cloud.xyz, [[15, 0, 0]], atol=1e-12)


def test_project_yawed():
    cloud = project_frame(single_beam(), SensorPose((0, 0, 0), yaw=np.pi / 2))
    np.testing.assert_allclose(cloud.xyz, [[0, 10, 0]], atol=1e-9)


def test_project_timestamp_mismatch():
    with pytest.raises(ValueError):
        project_frame(single_beam(), SensorPose((0, 0, 0), timestamp=1.0))


def test_frame_rejects_bad_ranges():
    with pytest.raises(ValueError):
        LadarFrame(np.array([[-1.0]]), 0, 0.1, 0, 0.1)
    with pytest.raises(ValueError):
        LadarFrame(np.array([[70.0]]), 0, 0.1, 0, 0.1, max_range=60.0)
    with pytest.raises(ValueError):
        LadarFrame(np.ones((2, 2)), 0, 0.0, 0, 0.1)


@given(angles, angles, angles)
def test_rotation_orthonormal(yaw, pitch, roll):
    r = rotation_matrix(yaw, pitch, roll)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(r) - 1.0) < 1e-9


def random_frame(rng, rows=6, cols=9):
    ranges = rng.uniform(1.0, 50.0, (rows, cols))
    ranges[rng.random((rows, cols)) < 0.3] = np.nan
    return LadarFrame(ranges, -0.4, 0.09, -0.3, 0.05)


@settings(max_examples=30)
@given(st.integers(0, 2**31), angles, angles, angles)
def test_distance_round_trip(seed, yaw, pitch, roll):
    rng = np.random.default_rng(seed)
    f = random_frame(rng)
    pose = SensorPose(tuple(rng.uniform(-20, 20, 3)), yaw, pitch, roll)
    cloud = project_frame(f, pose)
    assert len(cloud) == int(np.isfinite(f.ranges).sum())
    d = np.linalg.norm(cloud.xyz - np.asarray(pose.position), axis=1)
    np.testing.assert_allclose(d, cloud.sensor_distance, atol=1e-6)
    np.testing.assert_allclose(cloud.sensor_distance, f.ranges[cloud.rows, cloud.cols])


@settings(max_examples=30)
@given(st.integers(0, 2**31), angles, angles)
def test_projection_equivariant(seed, yaw, yaw2):
    rng = np.random.default_rng(seed)
    f = random_frame(rng)
    pose = SensorPose(tuple(rng.uniform(-5, 5, 3)), yaw, 0.1, -0.05)
    shift = rng.uniform(-10, 10, 3)
    # rigid motion T: rotate by yaw2 about z, then translate
    rt = rotation_matrix(yaw2, 0.0, 0.0)
    moved = rt @ np.asarray(pose.position) + shift
    composed = rt @ pose.rotation
    # recover yaw/pitch/roll of the composed rotation (yaw-pitch-roll convention)
    pitch = -np.arcsin(composed[2, 0])
    roll = np.arctan2(composed[2, 1], composed[2, 2])
    new_yaw = np.arctan2(composed[1, 0], composed[0, 0])
    a = project_frame(f, pose).xyz @ rt.T + shift
    b = project_frame(f, SensorPose(tuple(moved), new_yaw, pitch, roll)).xyz
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_all_nan_gives_no_points():
    f = LadarFrame(np.full((3, 3), np.nan), 0, 0.1, 0, 0.1)
    assert len(project_frame(f, SensorPose((0, 0, 0)))) == 0


def test_file_round_trip(tmp_path, rng):
    frames = []
    for k in range(3):
        f = random_frame(rng)
        f = LadarFrame(f.ranges.astype(np.float32).astype(float), f.az_start, f.az_step, f.el_start, f.el_step,
                       timestamp=0.1 * k, frame_id=k)
        frames.append((f, SensorPose((k, 2.0, 1.5), 0.1 * k, 0.0, 0.0, timestamp=0.1 * k)))
    path = tmp_path / "seq.ldr"
    write_frames(path, frames)
    back = read_frames(path)
    assert len(back) == 3
    for (f0, p0), (f1, p1) in zip(frames, back):
        assert f1.frame_id == f0.frame_id and f1.timestamp == f0.timestamp
        np.testing.assert_array_equal(f1.ranges, f0.ranges)
        assert p1.position == p0.position and p1.yaw == p0.yaw


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ldr"
    path.write_bytes(b"XXXX")
    with pytest.raises(FrameFormatError) as err:
        read_frames(path)
    assert err.value.offset == 0


def test_truncated_frame_reports_offset(tmp_path):
    buf = io.BytesIO()
    f = LadarFrame(np.ones((2, 2)), 0, 0.1, 0, 0.1)
    write_frame(buf, f, SensorPose((0, 0, 0)))
    path = tmp_path / "cut.ldr"
    path.write_bytes(b"LDR1" + buf.getvalue()[:-3])
    with pytest.raises(FrameFormatError) as err:
        read_frames(path)
    assert err.value.offset == 4


def test_out_of_order_frames(tmp_path):
    f0 = LadarFrame(np.ones((2, 2)), 0, 0.1, 0, 0.1, timestamp=0.1, frame_id=1)
    f1 = LadarFrame(np.ones((2, 2)), 0, 0.1, 0, 0.1, timestamp=0.0, frame_id=0)
    path = tmp_path / "order.ldr"
    write_frames(path, [(f0, SensorPose((0, 0, 0), timestamp=0.1)), (f1, SensorPose((0, 0, 0)))])
    with pytest.raises(FrameFormatError):
        read_frames(path)
