"""Pipeline driver, configuration, and mover-detection scoring against simulator truth."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Optional, TextIO

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .clustering import ClusterParams, cluster_frame, nonground_mask
from .ground_filter import GroundParams, classify_ground
from .registration import RegistrationConfig
from .scan_geometry import LadarFrame, SensorPose, iter_frames, project_frame
from .simulator import GroundTruthFrame
from .tracker import Tracker, TrackerParams, TrackRecord, write_records


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GroundBlock(_Block):
    cell_size: float = Field(2.0, gt=0)
    height_tolerance: float = Field(0.15, gt=0)
    max_tilt_deg: float = Field(20.0, gt=0, lt=90)
    min_points_per_cell: int = Field(5, ge=3)
    refit_iterations: int = Field(2, ge=0)
    neighbor_rings: int = Field(2, ge=0)
    seed_band: float = Field(0.3, gt=0)

    def params(self) -> GroundParams:
        return GroundParams(
            self.cell_size, self.height_tolerance, math.radians(self.max_tilt_deg),
            self.min_points_per_cell, self.refit_iterations, self.neighbor_rings, self.seed_band,
        )


class ClusterBlock(_Block):
    dt_coefficient: float = Field(0.03, gt=0)
    dt_floor: float = Field(0.1, ge=0)
    min_cluster_points: int = Field(5, ge=1)
    neighborhood: Literal[4, 8] = 8
    bridge_gap: int = Field(12, ge=0)
    bridge_distance: float = Field(2.5, gt=0)
    continuation: bool = True

    def params(self) -> ClusterParams:
        return ClusterParams(
            self.dt_coefficient, self.dt_floor, self.min_cluster_points, self.neighborhood,
            self.bridge_gap, self.bridge_distance, self.continuation,
        )


class DensityBlock(_Block):
    k_sigma: float = Field(0.01, gt=0)
    sigma_floor: float = Field(0.05, gt=0)
    half_life: float = Field(0.5, gt=0)


class RegistrationBlock(_Block):
    vertical_slices: int = Field(7, ge=1)
    budget_slices: int = Field(3, ge=1)
    max_cells_xy: int = Field(40, ge=4)
    margin_sigmas: float = Field(3.0, ge=0)
    smoothing: float = Field(0.5, ge=0)
    yaw_samples: Literal[1, 3, 4, 5] = 1
    yaw_range_deg: float = Field(6.0, ge=0)


class TrackerBlock(_Block):
    process_accel_sigma: float = Field(3.0, gt=0)
    meas_sigma: float = Field(0.2, gt=0)
    accel_limit: float = Field(15.0, gt=0)
    speed_min: float = Field(0.75, gt=0)
    confirm_frames: int = Field(3, ge=1)
    max_misses: int = Field(8, ge=1)
    gate_inflation: float = Field(3.0, gt=0)
    ambiguity_margin: float = Field(0.1, gt=0)
    initial_speed_sigma: float = Field(10.0, gt=0)
    accel_warmup: int = Field(3, ge=0)
    grid_margin: float = Field(1.0, ge=0)
    fragment_margin: float = Field(0.5, ge=0)
    aperture_cap: float = Field(25.0, ge=1)
    mover_sigmas: float = Field(2.0, ge=0)
    min_score: float = Field(0.5, ge=0, lt=1)
    occlusion_inflation: float = Field(25.0, ge=1)
    growth_margin: float = Field(0.5, ge=0)
    birth_size_ratio: float = Field(2.0, ge=1)


class BudgetBlock(_Block):
    low_budget: bool = False
    threads: int = Field(1, ge=1)


class EvalBlock(_Block):
    match_radius: float = Field(2.0, gt=0)


class PipelineConfig(_Block):
    ground: GroundBlock = GroundBlock()
    cluster: ClusterBlock = ClusterBlock()
    density: DensityBlock = DensityBlock()
    registration: RegistrationBlock = RegistrationBlock()
    tracker: TrackerBlock = TrackerBlock()
    budget: BudgetBlock = BudgetBlock()
    evaluation: EvalBlock = EvalBlock()
    input: Optional[str] = None
    output: Optional[str] = None
    truth: Optional[str] = None
    seed: int = 0

    def registration_config(self) -> RegistrationConfig:
        r, d = self.registration, self.density
        return RegistrationConfig(
            k_sigma=d.k_sigma, sigma_floor=d.sigma_floor, vertical_slices=r.vertical_slices,
            budget_slices=r.budget_slices, low_budget=self.budget.low_budget, max_cells_xy=r.max_cells_xy,
            margin_sigmas=r.margin_sigmas, smoothing=r.smoothing,
        )

    def tracker_params(self) -> TrackerParams:
        t, r = self.tracker, self.registration
        return TrackerParams(
            **t.model_dump(), model_half_life=self.density.half_life,
            yaw_samples=r.yaw_samples, yaw_range=math.radians(r.yaw_range_deg),
        )


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def _set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: '{k}' is not a section")
    node[keys[-1]] = value


def build_config(data: dict | None = None, overrides: Iterable[str] = ()) -> PipelineConfig:
    """Validate a config tree after applying ``key.path=value`` overrides (values parsed as YAML)."""
    tree = dict(data or {})
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        _set_path(tree, key.strip(), yaml.safe_load(raw))
    try:
        cfg = PipelineConfig.model_validate(tree)
        cfg.tracker_params()
    except ValidationError as exc:
        err = exc.errors()[0]
        key = ".".join(str(p) for p in err["loc"])
        raise ConfigError(f"{key}: {err['msg']}") from None
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> PipelineConfig:
    data = {}
    if path is not None:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping at the top level")
    return build_config(data, overrides)


# --- pipeline ------------------------------------------------------------------------


@dataclass
class FrameTiming:
    frames: int = 0
    seconds: float = 0.0

    @property
    def fps(self) -> float:
        return self.frames / self.seconds if self.seconds > 0 else float("inf")


class Pipeline:
    """Ground filter, clustering and tracking for one frame sequence."""

    def __init__(self, config: PipelineConfig = PipelineConfig()):
        self.config = config
        self.ground = config.ground.params()
        self.cluster = config.cluster.params()
        self.tracker = Tracker(config.tracker_params(), config.registration_config(), config.budget.threads)
        self.timing = FrameTiming()

    def process(self, frame: LadarFrame, pose: SensorPose) -> list[TrackRecord]:
        start = time.perf_counter()
        cloud = project_frame(frame, pose)
        ground = classify_ground(cloud, self.ground)
        clusters = cluster_frame(frame, nonground_mask(frame, cloud, ground), pose, self.cluster)
        records = self.tracker.step(clusters, frame.timestamp, frame.frame_id)
        self.timing.frames += 1
        self.timing.seconds += time.perf_counter() - start
        return records

    def run(self, frames: Iterable[tuple[LadarFrame, SensorPose]]) -> list[TrackRecord]:
        out = []
        for frame, pose in frames:
            out.extend(self.process(frame, pose))
        return out

    def close(self) -> None:
        self.tracker.close()


def run_pipeline(config: PipelineConfig, frames=None, truth=None):
    """Process ``frames`` (or ``config.input``); return (records, EvalReport or None, timing).

    When ``config.output`` is set the detection stream is written there.
    """
    if frames is None:
        if config.input is None:
            raise ConfigError("input: no frame file given")
        frames = iter_frames(config.input)
    pipe = Pipeline(config)
    try:
        records = pipe.run(frames)
    finally:
        pipe.close()
    if config.output is not None:
        with open(config.output, "w") as fh:
            write_records(records, fh)
    if truth is None and config.truth is not None:
        from .simulator import read_truth

        truth = read_truth(config.truth)
    report = None
    if truth is not None:
        report = evaluate(records, truth, config.evaluation.match_radius)
    return records, report, pipe.timing


# --- evaluation ------------------------------------------------------------------------


@dataclass
class EvalReport:
    frames: int
    hit_percentage: dict[int, float]
    visible_frames: dict[int, int]
    false_alarms: int
    latency: dict[int, Optional[int]]
    assignment: list[dict[int, int]] = field(repr=False)
    throughput: Optional[float] = None

    @property
    def false_alarms_per_frame(self) -> float:
        return self.false_alarms / self.frames if self.frames else 0.0

    @property
    def mean_hit_percentage(self) -> float:
        vals = [self.hit_percentage[k] for k, v in self.visible_frames.items() if v > 0]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_latency(self) -> float:
        vals = [v for v in self.latency.values() if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def lines(self, include_throughput: bool = False) -> list[str]:
        out = [
            f"frames\t{self.frames}",
            f"targets\t{len(self.hit_percentage)}",
            f"false_alarms\t{self.false_alarms}",
            f"false_alarms_per_frame\t{self.false_alarms_per_frame:.6f}",
            f"hit_percentage_mean\t{self.mean_hit_percentage:.4f}",
            f"latency_frames_mean\t{self.mean_latency:.4f}",
        ]
        for oid in sorted(self.hit_percentage):
            lat = self.latency[oid]
            out.append(f"hit_percentage.{oid}\t{self.hit_percentage[oid]:.4f}")
            out.append(f"visible_frames.{oid}\t{self.visible_frames[oid]}")
            out.append(f"latency_frames.{oid}\t{'none' if lat is None else lat}")
        for k, pairs in enumerate(self.assignment):
            text = ",".join(f"{o}:{t}" for o, t in sorted(pairs.items())) or "-"
            out.append(f"assignment.{k}\t{text}")
        if include_throughput and self.throughput is not None:
            out.append(f"throughput_fps\t{self.throughput:.3f}")
        return out

    def write(self, fh: TextIO, include_throughput: bool = False) -> None:
        fh.write("\n".join(self.lines(include_throughput)) + "\n")


def evaluate(records: list[TrackRecord], truth: list[GroundTruthFrame], match_radius: float = 2.0) -> EvalReport:
    """Per-frame mover scoring.

    A true mover is hit in a frame when an is_mover track lies within
    ``match_radius`` of its true position; only frames where it has at least
    one ground-truth hit count toward its percentage.  An is_mover track far
    from every true mover is a false alarm.  Latency is the number of frames
    from first visibility to the first hit.
    """
    if match_radius <= 0:
        raise ValueError("match_radius must be positive")
    ids = [gt.frame_id for gt in truth]
    if ids != list(range(len(ids))):
        raise ValueError("truth frame ids must run 0, 1, 2, ... without gaps")
    by_frame: dict[int, list[TrackRecord]] = {}
    for rec in records:
        if rec.frame_id not in range(len(ids)):
            raise ValueError(f"detection frame id {rec.frame_id} has no ground truth")
        by_frame.setdefault(rec.frame_id, []).append(rec)

    movers = sorted({o.id for gt in truth for o in gt.objects if o.is_mover})
    hits = {m: 0 for m in movers}
    visible = {m: 0 for m in movers}
    first_visible: dict[int, int] = {}
    first_hit: dict[int, int] = {}
    false_alarms = 0
    assignment = []
    for gt in truth:
        truths = [o for o in gt.objects if o.is_mover]
        flagged = [r for r in by_frame.get(gt.frame_id, []) if r.is_mover]
        pairs: dict[int, int] = {}
        if truths and flagged:
            tp = np.array([[o.x, o.y] for o in truths])
            dp = np.array([[r.x, r.y] for r in flagged])
            dist = np.hypot(*(tp[:, None, :] - dp[None, :, :]).transpose(2, 0, 1))
            near = dist <= match_radius
            false_alarms += int((~near.any(axis=0)).sum())
            # one-to-one assignment for reporting, nearest first
            order = np.argsort(dist, axis=None, kind="stable")
            used_t, used_d = set(), set()
            for flat in order:
                i, j = divmod(int(flat), len(flagged))
                if not near[i, j] or i in used_t or j in used_d:
                    continue
                used_t.add(i)
                used_d.add(j)
                pairs[truths[i].id] = flagged[j].track_id
            hit_rows = near.any(axis=1)
        else:
            false_alarms += len(flagged)
            hit_rows = np.zeros(len(truths), dtype=bool)
        for o, hit in zip(truths, hit_rows):
            if o.hits > 0:
                visible[o.id] += 1
                first_visible.setdefault(o.id, gt.frame_id)
                if hit:
                    hits[o.id] += 1
            if hit and o.id in first_visible:
                first_hit.setdefault(o.id, gt.frame_id)
        assignment.append(pairs)

    pct = {m: 100.0 * hits[m] / visible[m] if visible[m] else 0.0 for m in movers}
    latency = {m: first_hit[m] - first_visible[m] if m in first_hit else None for m in movers}
    return EvalReport(len(truth), pct, visible, false_alarms, latency, assignment)
