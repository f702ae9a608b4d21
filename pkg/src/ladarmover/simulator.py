"""Deterministic synthetic scanning-Ladar sequences with ground truth.

Scenes are boxes and vertical cylinders on piecewise-sloped ground, seen by a
scanning sensor on a moving platform.  Every beam is an ideal ray; the nearest
surface within ``max_range`` wins and its range gets Gaussian noise.

Scene files are YAML::

    duration: 20.0            # seconds
    frame_rate: 10.0          # Hz
    sensor:
      height: 2.0             # sensor above ground at the platform position
      rows: 64                # elevation samples
      cols: 180               # azimuth samples
      az_fov_deg: 90.0        # centred on the heading
      el_min_deg: -20.0
      el_max_deg: 10.0
      max_range: 60.0
      range_noise: 0.02
      trajectory: {start: [0, 0, 0], segments: [{duration: 20, speed: 3.0}]}
    ground:
      z: 0.0
      ramps: [{x_start: 10, x_end: 30, angle_deg: 5}]   # optional
    objects:
      - {id: 1, shape: box, size: [4.5, 1.8, 1.6],
         trajectory: {start: [15, 8, 0], segments: [{duration: 20, speed: 5}]}}
      - {id: 2, shape: cylinder, radius: 0.3, height: 5.0, position: [40, -8]}

Trajectory ``start`` is ``[x, y, yaw_deg]``; each segment runs for ``duration``
seconds at ``speed`` m/s with constant ``yaw_rate_deg`` deg/s (zero for a straight
line).  The last segment's motion continues past its end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .scan_geometry import LadarFrame, SensorPose, beam_directions, rotation_matrix, write_frame, MAGIC

NO_RETURN = -1
GROUND = 0


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Segment(_Strict):
    duration: float = Field(gt=0)
    speed: float = 0.0
    yaw_rate_deg: float = 0.0


class Trajectory(_Strict):
    start: tuple[float, float, float] = (0.0, 0.0, 0.0)
    segments: list[Segment] = []

    def _advance(self, x, y, yaw, seg: Segment, dt: float):
        w = math.radians(seg.yaw_rate_deg)
        v = seg.speed
        if abs(w) < 1e-12:
            return x + v * dt * math.cos(yaw), y + v * dt * math.sin(yaw), yaw
        yaw1 = yaw + w * dt
        return (
            x + v / w * (math.sin(yaw1) - math.sin(yaw)),
            y - v / w * (math.cos(yaw1) - math.cos(yaw)),
            yaw1,
        )

    def _segment_at(self, t: float):
        x, y = self.start[0], self.start[1]
        yaw = math.radians(self.start[2])
        elapsed = 0.0
        for k, seg in enumerate(self.segments):
            last = k == len(self.segments) - 1
            if t <= elapsed + seg.duration or last:
                return x, y, yaw, seg, t - elapsed
            x, y, yaw = self._advance(x, y, yaw, seg, seg.duration)
            elapsed += seg.duration
        return x, y, yaw, None, 0.0

    def pose(self, t: float) -> tuple[float, float, float]:
        x, y, yaw, seg, dt = self._segment_at(t)
        if seg is None:
            return x, y, yaw
        return self._advance(x, y, yaw, seg, dt)

    def velocity(self, t: float) -> tuple[float, float]:
        x, y, yaw, seg, dt = self._segment_at(t)
        if seg is None:
            return 0.0, 0.0
        _, _, yaw_t = self._advance(x, y, yaw, seg, dt)
        return seg.speed * math.cos(yaw_t), seg.speed * math.sin(yaw_t)

    @property
    def moves(self) -> bool:
        return any(abs(s.speed) > 0 for s in self.segments)


class Ramp(_Strict):
    x_start: float
    x_end: float
    angle_deg: float

    @model_validator(mode="after")
    def _ordered(self):
        if self.x_end <= self.x_start:
            raise ValueError("ramp x_end must exceed x_start")
        return self


class Ground(_Strict):
    """Height varies only along x: flat at ``z`` with optional linear ramps."""

    z: float = 0.0
    ramps: list[Ramp] = []
    enabled: bool = True

    def height(self, x):
        x = np.asarray(x, dtype=float)
        h = np.full_like(x, self.z)
        for r in self.ramps:
            h = h + math.tan(math.radians(r.angle_deg)) * np.clip(x - r.x_start, 0.0, r.x_end - r.x_start)
        return h

    def pieces(self):
        """(x_lo, x_hi, z_at_x_lo, slope) for each linear piece, covering the whole x axis."""
        knots = sorted({k for r in self.ramps for k in (r.x_start, r.x_end)})
        edges = [-math.inf, *knots, math.inf]
        out = []
        for lo, hi in zip(edges[:-1], edges[1:]):
            if math.isinf(lo) and math.isinf(hi):
                probe = anchor = 0.0
            elif math.isinf(lo):
                probe, anchor = hi - 1.0, hi
            elif math.isinf(hi):
                probe, anchor = lo + 1.0, lo
            else:
                probe, anchor = 0.5 * (lo + hi), lo
            slope = sum(
                math.tan(math.radians(r.angle_deg)) for r in self.ramps if r.x_start <= probe < r.x_end
            )
            out.append((lo, hi, anchor, float(self.height(anchor)), slope))
        return out

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        t_best = np.full(len(dirs), np.inf)
        if not self.enabled:
            return t_best
        for lo, hi, anchor, z0, slope in self.pieces():
            # plane z = z0 + slope (x - anchor)
            denom = dirs[:, 2] - slope * dirs[:, 0]
            num = z0 + slope * (origin[0] - anchor) - origin[2]
            with np.errstate(divide="ignore", invalid="ignore"):
                t = num / denom
            x = origin[0] + t * dirs[:, 0]
            ok = (t > 1e-9) & (x >= lo) & (x <= hi) & np.isfinite(t)
            t_best = np.where(ok & (t < t_best), t, t_best)
        return t_best


class Primitive(_Strict):
    id: int = Field(ge=1)
    shape: Literal["box", "cylinder"]
    size: Optional[tuple[float, float, float]] = None
    radius: Optional[float] = None
    height: Optional[float] = None
    position: Optional[tuple[float, float]] = None
    trajectory: Optional[Trajectory] = None

    @model_validator(mode="after")
    def _check(self):
        if self.shape == "box":
            if self.size is None or min(self.size) <= 0:
                raise ValueError(f"box {self.id} needs positive size [length, width, height]")
        else:
            if not (self.radius and self.radius > 0 and self.height and self.height > 0):
                raise ValueError(f"cylinder {self.id} needs positive radius and height")
        if (self.position is None) == (self.trajectory is None):
            raise ValueError(f"object {self.id} needs exactly one of position or trajectory")
        return self

    @property
    def path(self) -> Trajectory:
        if self.trajectory is not None:
            return self.trajectory
        return Trajectory(start=(self.position[0], self.position[1], 0.0))

    @property
    def is_mover_truth(self) -> bool:
        return self.path.moves

    @property
    def top(self) -> float:
        return self.size[2] if self.shape == "box" else self.height

    def intersect(self, t: float, ground: Ground, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        x, y, yaw = self.path.pose(t)
        zb = float(ground.height(x)) if ground.enabled else ground.z
        if self.shape == "box":
            return _ray_box(origin, dirs, np.array([x, y, zb + self.size[2] / 2]), yaw, np.asarray(self.size) / 2)
        return _ray_cylinder(origin, dirs, np.array([x, y]), zb, zb + self.height, self.radius)


def _ray_box(origin, dirs, center, yaw, half):
    rot = rotation_matrix(yaw, 0.0, 0.0)
    o = rot.T @ (origin - center)
    d = dirs @ rot  # rows are R^T d
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    # parallel rays: inside the slab -> (-inf, inf), outside -> empty
    par = d == 0
    inside = np.abs(o) <= half
    lo = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    hit = (t_near <= t_far) & (t_far > 1e-9)
    t_hit = np.where(t_near > 1e-9, t_near, t_far)
    return np.where(hit, t_hit, np.inf)


def _ray_cylinder(origin, dirs, center, z0, z1, radius):
    ox, oy = origin[0] - center[0], origin[1] - center[1]
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    a = dx * dx + dy * dy
    b = 2.0 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - radius * radius
    disc = b * b - 4 * a * c
    best = np.full(len(dirs), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.maximum(disc, 0.0))
        for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
            z = origin[2] + t * dz
            ok = (disc >= 0) & (a > 0) & (t > 1e-9) & (z >= z0) & (z <= z1)
            best = np.where(ok & (t < best), t, best)
        for zc in (z0, z1):
            t = (zc - origin[2]) / dz
            px, py = ox + t * dx, oy + t * dy
            ok = (dz != 0) & (t > 1e-9) & (px * px + py * py <= radius * radius)
            best = np.where(ok & (t < best), t, best)
    return best


class SensorSpec(_Strict):
    height: float = 2.0
    pitch_deg: float = 0.0
    roll_deg: float = 0.0
    rows: int = Field(64, ge=1)
    cols: int = Field(180, ge=1)
    az_fov_deg: float = Field(90.0, gt=0)
    el_min_deg: float = -20.0
    el_max_deg: float = 10.0
    max_range: float = Field(60.0, gt=0)
    range_noise: float = Field(0.02, ge=0)
    trajectory: Trajectory = Trajectory()

    @model_validator(mode="after")
    def _check(self):
        if self.el_max_deg <= self.el_min_deg:
            raise ValueError("el_max_deg must exceed el_min_deg")
        return self

    def angles(self):
        """(az_start, az_step, el_start, el_step) with samples at cell centres of the field of view."""
        az_step = math.radians(self.az_fov_deg) / self.cols
        el_step = math.radians(self.el_max_deg - self.el_min_deg) / self.rows
        az_start = -math.radians(self.az_fov_deg) / 2 + az_step / 2
        el_start = math.radians(self.el_min_deg) + el_step / 2
        return az_start, az_step, el_start, el_step

    def pose(self, t: float, ground: Ground) -> SensorPose:
        x, y, yaw = self.trajectory.pose(t)
        base = float(ground.height(x)) if ground.enabled else ground.z
        return SensorPose((x, y, base + self.height), yaw, math.radians(self.pitch_deg), math.radians(self.roll_deg), t)


class Scene(_Strict):
    duration: float = Field(gt=0)
    frame_rate: float = Field(10.0, gt=0)
    sensor: SensorSpec = SensorSpec()
    ground: Ground = Ground()
    objects: list[Primitive] = []

    @model_validator(mode="after")
    def _unique_ids(self):
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError("object ids must be unique")
        return self

    @property
    def n_frames(self) -> int:
        return int(math.floor(self.duration * self.frame_rate + 1e-9))

    def frame_time(self, frame_id: int) -> float:
        return frame_id / self.frame_rate


def load_scene(path: str | Path) -> Scene:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    return Scene.model_validate(data or {})


@dataclass(frozen=True, eq=False)
class ObjectTruth:
    id: int
    x: float
    y: float
    yaw: float
    vx: float
    vy: float
    hits: int
    is_mover: bool


@dataclass(frozen=True, eq=False)
class GroundTruthFrame:
    frame_id: int
    timestamp: float
    labels: np.ndarray
    objects: tuple[ObjectTruth, ...]

    def object(self, oid: int) -> ObjectTruth:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)


def cast_rays(scene: Scene, t: float, origin: np.ndarray, dirs: np.ndarray):
    """Nearest hit distance and surface label for each ray (inf / NO_RETURN on a miss)."""
    best = scene.ground.intersect(origin, dirs)
    label = np.where(np.isfinite(best), GROUND, NO_RETURN)
    for obj in scene.objects:
        t_obj = obj.intersect(t, scene.ground, origin, dirs)
        closer = t_obj < best
        best = np.where(closer, t_obj, best)
        label = np.where(closer, obj.id, label)
    return best, label


def render_frame(scene: Scene, t: float, frame_id: int = 0, seed: int | None = 0) -> tuple[LadarFrame, SensorPose, GroundTruthFrame]:
    sensor = scene.sensor
    pose = sensor.pose(t, scene.ground)
    az0, daz, el0, del_ = sensor.angles()
    probe = LadarFrame(np.ones((sensor.rows, sensor.cols)), az0, daz, el0, del_)
    dirs = beam_directions(probe).reshape(-1, 3) @ pose.rotation.T
    origin = np.asarray(pose.position, dtype=float)
    dist, label = cast_rays(scene, t, origin, dirs)
    miss = dist > sensor.max_range
    label = np.where(miss, NO_RETURN, label)
    ranges = np.where(miss, np.nan, dist)
    if sensor.range_noise > 0 and seed is not None:
        rng = np.random.default_rng([seed, frame_id])
        noise = rng.normal(0.0, sensor.range_noise, ranges.shape)
        ranges = np.clip(ranges + noise, 1e-3, sensor.max_range)
    shape = (sensor.rows, sensor.cols)
    frame = LadarFrame(ranges.reshape(shape), az0, daz, el0, del_, timestamp=t, frame_id=frame_id, max_range=sensor.max_range)
    label = label.reshape(shape)
    hits = np.bincount(label[label > 0].ravel(), minlength=max([o.id for o in scene.objects], default=0) + 1)
    truths = []
    for obj in scene.objects:
        x, y, yaw = obj.path.pose(t)
        vx, vy = obj.path.velocity(t)
        truths.append(ObjectTruth(obj.id, x, y, yaw, vx, vy, int(hits[obj.id]), obj.is_mover_truth))
    return frame, pose, GroundTruthFrame(frame_id, t, label, tuple(truths))


# --- ground-truth sidecar ------------------------------------------------------------


def _rle(values: np.ndarray) -> str:
    flat = values.ravel()
    if flat.size == 0:
        return ""
    change = np.nonzero(np.diff(flat))[0] + 1
    starts = np.concatenate(([0], change))
    lengths = np.diff(np.concatenate((starts, [flat.size])))
    return " ".join(f"{flat[s]}x{n}" for s, n in zip(starts, lengths))


def _unrle(text: str, shape) -> np.ndarray:
    out = []
    for token in text.split():
        value, count = token.split("x")
        out.append(np.full(int(count), int(value), dtype=np.int32))
    flat = np.concatenate(out) if out else np.empty(0, dtype=np.int32)
    return flat.reshape(shape)


def format_truth(gt: GroundTruthFrame) -> str:
    rows, cols = gt.labels.shape
    lines = [f"frame\t{gt.frame_id}\t{gt.timestamp:.6f}\t{rows}\t{cols}"]
    for o in gt.objects:
        lines.append(
            f"object\t{o.id}\t{o.x:.6f}\t{o.y:.6f}\t{o.yaw:.6f}\t{o.vx:.6f}\t{o.vy:.6f}\t{o.hits}\t{int(o.is_mover)}"
        )
    lines.append("labels\t" + _rle(gt.labels))
    return "\n".join(lines) + "\n"


class TruthFormatError(ValueError):
    pass


def read_truth(path: str | Path) -> list[GroundTruthFrame]:
    frames = []
    current = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            kind, _, rest = line.partition("\t")
            try:
                if kind == "frame":
                    fid, ts, rows, cols = rest.split("\t")
                    current = {"id": int(fid), "t": float(ts), "shape": (int(rows), int(cols)), "objects": []}
                elif kind == "object":
                    f = rest.split("\t")
                    current["objects"].append(
                        ObjectTruth(int(f[0]), *map(float, f[1:6]), int(f[6]), bool(int(f[7])))
                    )
                elif kind == "labels":
                    labels = _unrle(rest, current["shape"])
                    frames.append(GroundTruthFrame(current["id"], current["t"], labels, tuple(current["objects"])))
                    current = None
                else:
                    raise TruthFormatError(f"{path}:{lineno}: unknown record {kind!r}")
            except (ValueError, TypeError, IndexError) as exc:
                if isinstance(exc, TruthFormatError):
                    raise
                raise TruthFormatError(f"{path}:{lineno}: {exc}") from exc
    return frames


def generate_sequence(scene: Scene, seed: int, out_dir: str | Path) -> tuple[Path, Path]:
    """Render every frame; write ``frames.ldr`` and ``truth.txt`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames_path = out_dir / "frames.ldr"
    truth_path = out_dir / "truth.txt"
    with open(frames_path, "wb") as fb, open(truth_path, "w") as ft:
        fb.write(MAGIC)
        for k in range(scene.n_frames):
            frame, pose, gt = render_frame(scene, scene.frame_time(k), k, seed)
            write_frame(fb, frame, pose)
            ft.write(format_truth(gt))
    return frames_path, truth_path


def render_sequence(scene: Scene, seed: int = 0):
    """In-memory variant of :func:`generate_sequence`: list of (frame, pose, truth)."""
    return [render_frame(scene, scene.frame_time(k), k, seed) for k in range(scene.n_frames)]
