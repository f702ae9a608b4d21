"""Scanning-Ladar frames in angle-depth space and their projection to world points.

Sensor convention: x forward, y left, z up.  Azimuth is measured about +z from
+x, elevation up from the x-y plane.  Poses rotate sensor vectors into the world
with ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, NamedTuple

import numpy as np

MAGIC = b"LDR1"
_HEADER = struct.Struct("<Id6dII4d")


class FrameFormatError(ValueError):
    """Raised when a frame sequence file cannot be parsed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    rz = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return rz @ ry @ rx


@dataclass(frozen=True)
class SensorPose:
    position: tuple[float, float, float]
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    timestamp: float = 0.0

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.yaw, self.pitch, self.roll)

    def as_array(self) -> np.ndarray:
        return np.array([*self.position, self.yaw, self.pitch, self.roll], dtype=float)


@dataclass(frozen=True, eq=False)
class LadarFrame:
    """One sweep: a rows x cols grid of ranges, NaN where there was no return."""

    ranges: np.ndarray
    az_start: float
    az_step: float
    el_start: float
    el_step: float
    timestamp: float = 0.0
    frame_id: int = 0
    max_range: float = np.inf

    def __post_init__(self):
        ranges = np.asarray(self.ranges, dtype=float)
        if ranges.ndim != 2 or ranges.shape[0] < 1 or ranges.shape[1] < 1:
            raise ValueError(f"ranges must be a non-empty 2D grid, got shape {ranges.shape}")
        if not (self.az_step > 0 and self.el_step > 0):
            raise ValueError("angular steps must be positive")
        finite = ranges[np.isfinite(ranges)]
        if finite.size and (finite.min() <= 0 or finite.max() > self.max_range):
            raise ValueError("finite ranges must lie in (0, max_range]")
        ranges.setflags(write=False)
        object.__setattr__(self, "ranges", ranges)

    @property
    def rows(self) -> int:
        return self.ranges.shape[0]

    @property
    def cols(self) -> int:
        return self.ranges.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.ranges.shape

    def azimuths(self) -> np.ndarray:
        return self.az_start + self.az_step * np.arange(self.cols)

    def elevations(self) -> np.ndarray:
        return self.el_start + self.el_step * np.arange(self.rows)


class WorldPoint(NamedTuple):
    x: float
    y: float
    z: float
    sensor_distance: float
    grid_row: int
    grid_col: int


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Struct-of-arrays set of world points with their source grid cells."""

    xyz: np.ndarray
    sensor_distance: np.ndarray
    rows: np.ndarray = field(default=None)
    cols: np.ndarray = field(default=None)

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)
        n = len(xyz)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "sensor_distance", np.asarray(self.sensor_distance, dtype=float).reshape(n))
        for name in ("rows", "cols"):
            value = getattr(self, name)
            value = np.full(n, -1, dtype=np.int64) if value is None else np.asarray(value, dtype=np.int64).reshape(n)
            object.__setattr__(self, name, value)

    def __len__(self) -> int:
        return len(self.xyz)

    def __getitem__(self, index) -> WorldPoint:
        x, y, z = self.xyz[index]
        return WorldPoint(x, y, z, self.sensor_distance[index], int(self.rows[index]), int(self.cols[index]))

    def subset(self, mask_or_index) -> "PointCloud":
        return PointCloud(
            self.xyz[mask_or_index],
            self.sensor_distance[mask_or_index],
            self.rows[mask_or_index],
            self.cols[mask_or_index],
        )


def beam_direction(frame: LadarFrame, row: int, col: int) -> np.ndarray:
    if not (0 <= row < frame.rows and 0 <= col < frame.cols):
        raise IndexError(f"cell ({row}, {col}) outside {frame.rows}x{frame.cols} frame")
    az = frame.az_start + col * frame.az_step
    el = frame.el_start + row * frame.el_step
    return np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def beam_directions(frame: LadarFrame) -> np.ndarray:
    """All unit beam vectors in the sensor frame, shape (rows, cols, 3)."""
    az = frame.azimuths()[None, :]
    el = frame.elevations()[:, None]
    ce = np.cos(el)
    return np.stack(np.broadcast_arrays(ce * np.cos(az), ce * np.sin(az), np.sin(el)), axis=-1)


def project_frame(frame: LadarFrame, pose: SensorPose) -> PointCloud:
    if not np.isclose(pose.timestamp, frame.timestamp, rtol=0.0, atol=1e-9):
        raise ValueError(f"pose timestamp {pose.timestamp} does not match frame timestamp {frame.timestamp}")
    rows, cols = np.nonzero(np.isfinite(frame.ranges))
    r = frame.ranges[rows, cols]
    az = frame.az_start + cols * frame.az_step
    el = frame.el_start + rows * frame.el_step
    ce = np.cos(el)
    local = np.column_stack((ce * np.cos(az), ce * np.sin(az), np.sin(el))) * r[:, None]
    xyz = local @ pose.rotation.T + np.asarray(pose.position, dtype=float)
    return PointCloud(xyz, r, rows, cols)


# --- frame sequence files -------------------------------------------------------


def write_frames(path: str | Path, frames: list[tuple[LadarFrame, SensorPose]]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for frame, pose in frames:
            write_frame(fh, frame, pose)


def write_frame(fh: BinaryIO, frame: LadarFrame, pose: SensorPose) -> None:
    fh.write(
        _HEADER.pack(
            frame.frame_id,
            frame.timestamp,
            *pose.as_array(),
            frame.rows,
            frame.cols,
            frame.az_start,
            frame.az_step,
            frame.el_start,
            frame.el_step,
        )
    )
    fh.write(np.ascontiguousarray(frame.ranges, dtype="<f4").tobytes())


def iter_frames(path: str | Path) -> Iterator[tuple[LadarFrame, SensorPose]]:
    """Yield (frame, pose) pairs; raises FrameFormatError on truncated or invalid data."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FrameFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
        last_id = last_t = None
        while True:
            offset = fh.tell()
            head = fh.read(_HEADER.size)
            if not head:
                return
            if len(head) < _HEADER.size:
                raise FrameFormatError("truncated frame header", offset)
            frame_id, t, x, y, z, yaw, pitch, roll, rows, cols, az0, daz, el0, del_ = _HEADER.unpack(head)
            nbytes = 4 * rows * cols
            body = fh.read(nbytes)
            if len(body) < nbytes:
                raise FrameFormatError(f"truncated range block for frame {frame_id}", offset)
            if last_id is not None and (frame_id <= last_id or t <= last_t):
                raise FrameFormatError(f"frame {frame_id} out of order", offset)
            ranges = np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(float)
            try:
                frame = LadarFrame(ranges, az0, daz, el0, del_, timestamp=t, frame_id=frame_id)
            except ValueError as exc:
                raise FrameFormatError(str(exc), offset) from exc
            last_id, last_t = frame_id, t
            yield frame, SensorPose((x, y, z), yaw, pitch, roll, timestamp=t)


def read_frames(path: str | Path) -> list[tuple[LadarFrame, SensorPose]]:
    return list(iter_frames(path))
