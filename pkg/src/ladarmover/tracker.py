"""Constant-velocity Kalman tracking of every cluster, with registration-based
measurements, an acceleration gate, and a speed test for movers.

Each track keeps an accumulated surface model in a fixed *model frame* (the
world frame at the time the track was born).  The object's current pose is a
:class:`RigidMotion2D` about the model anchor ``a`` (the birth centroid), so the
anchor is observed at ``a + t`` and that is the Kalman measurement.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, TextIO

import numpy as np

from .clustering import ObjectCluster
from .density import AccumulatedModel, EmptyGridError, SurfaceDensity, build_density
from .registration import (
    RegistrationConfig,
    RegistrationResult,
    RigidMotion2D,
    SearchWindow,
    model_grid_spec,
    register,
    peak_curvature,
    rot2,
    smoothing_floor,
)

log = logging.getLogger(__name__)

MIN_GATE = 1.0  # association gate floor per axis
INNOVATION_FLOOR = 0.5  # innovations this small always validate
RECENT_WEIGHT = 0.0  # every retained component; partial recent views bias the center
NOISE_INTERVAL = 0.1  # s; accel_sigma is the acceleration spread per 10 Hz frame


@dataclass(frozen=True)
class TrackerParams:
    process_accel_sigma: float = 3.0
    meas_sigma: float = 0.2
    accel_limit: float = 15.0
    speed_min: float = 0.75
    confirm_frames: int = 3
    max_misses: int = 8
    gate_inflation: float = 3.0
    ambiguity_margin: float = 0.1
    # not named by the tracker contract; see the decisions notes
    initial_speed_sigma: float = 10.0
    accel_warmup: int = 3
    model_half_life: float = 0.5
    yaw_samples: int = 1
    yaw_range: float = math.radians(6.0)
    grid_margin: float = 1.0
    fragment_margin: float = 0.5
    aperture_cap: float = 25.0
    mover_sigmas: float = 2.0
    min_score: float = 0.5
    occlusion_inflation: float = 25.0
    growth_margin: float = 0.5
    birth_size_ratio: float = 2.0

    def __post_init__(self):
        for name in (
            "process_accel_sigma", "meas_sigma", "accel_limit", "speed_min", "max_misses",
            "gate_inflation", "ambiguity_margin", "initial_speed_sigma", "model_half_life",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.min_score < 1:
            raise ValueError("min_score must be in [0, 1)")
        if self.mover_sigmas < 0:
            raise ValueError("mover_sigmas must be non-negative")
        if self.birth_size_ratio < 1:
            raise ValueError("birth_size_ratio must be >= 1")
        if self.growth_margin < 0:
            raise ValueError("growth_margin must be non-negative")
        if self.occlusion_inflation < 1:
            raise ValueError("occlusion_inflation must be >= 1")
        if self.aperture_cap < 1:
            raise ValueError("aperture_cap must be >= 1")
        if self.confirm_frames < 1:
            raise ValueError("confirm_frames must be >= 1")
        if self.accel_warmup < 0:
            raise ValueError("accel_warmup must be non-negative")
        if self.yaw_samples not in (1, 3, 4, 5):
            raise ValueError("yaw_samples must be one of 1, 3, 4, 5")


# --- Kalman filter -------------------------------------------------------------------

_H = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class KalmanState:
    state: np.ndarray
    covariance: np.ndarray
    last_update: float

    def __post_init__(self):
        s = np.array(self.state, dtype=float).reshape(4)
        p = np.array(self.covariance, dtype=float).reshape(4, 4)
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(p))):
            raise ValueError("state and covariance must be finite")
        if np.abs(p - p.T).max() > 1e-9 * max(1.0, np.abs(p).max()):
            raise ValueError("covariance must be symmetric")
        if np.any(np.diag(p) < 0):
            raise ValueError("covariance diagonal must be non-negative")
        s.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "state", s)
        object.__setattr__(self, "covariance", p)

    @classmethod
    def initial(cls, position, t: float, pos_sigma: float, speed_sigma: float) -> "KalmanState":
        p = np.diag([pos_sigma**2, pos_sigma**2, speed_sigma**2, speed_sigma**2])
        return cls(np.array([position[0], position[1], 0.0, 0.0]), p, t)

    @property
    def position(self) -> np.ndarray:
        return self.state[:2].copy()

    @property
    def velocity(self) -> np.ndarray:
        return self.state[2:].copy()

    @property
    def speed(self) -> float:
        return float(math.hypot(self.state[2], self.state[3]))

    @property
    def position_std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance)[:2])


def transition(dt: float) -> np.ndarray:
    f = np.eye(4)
    f[0, 2] = f[1, 3] = dt
    return f


def process_noise(dt: float, accel_sigma: float, interval: float = NOISE_INTERVAL) -> np.ndarray:
    """Continuous white-acceleration noise with spectral density accel_sigma^2 * interval.

    The continuous form composes exactly over split intervals; ``interval`` sets
    the time over which ``accel_sigma`` is a per-step acceleration spread.
    """
    q = np.zeros((4, 4))
    a, b, c = dt**3 / 3.0, dt**2 / 2.0, dt
    q[0, 0] = q[1, 1] = a
    q[0, 2] = q[2, 0] = q[1, 3] = q[3, 1] = b
    q[2, 2] = q[3, 3] = c
    return accel_sigma**2 * interval * q


def kalman_predict(ks: KalmanState, t: float, accel_sigma: float, interval: float = NOISE_INTERVAL) -> KalmanState:
    dt = t - ks.last_update
    if dt < 0:
        raise ValueError(f"cannot predict backwards in time (t={t} < last update {ks.last_update})")
    if dt == 0:
        return ks
    f = transition(dt)
    p = f @ ks.covariance @ f.T + process_noise(dt, accel_sigma, interval)
    return KalmanState(f @ ks.state, 0.5 * (p + p.T), t)


def kalman_update(ks: KalmanState, z, meas_sigma: float, meas_cov=None) -> KalmanState:
    """Position measurement update in Joseph form, which keeps the covariance PSD.

    ``meas_cov`` (2x2) replaces the isotropic ``meas_sigma**2`` noise when given.
    """
    z = np.asarray(z, dtype=float).reshape(2)
    r = meas_sigma**2 * np.eye(2) if meas_cov is None else np.asarray(meas_cov, dtype=float).reshape(2, 2)
    p = ks.covariance
    s = _H @ p @ _H.T + r
    k = np.linalg.solve(s, _H @ p).T
    x = ks.state + k @ (z - _H @ ks.state)
    a = np.eye(4) - k @ _H
    p = a @ p @ a.T + k @ r @ k.T
    return KalmanState(x, 0.5 * (p + p.T), ks.last_update)


# --- tracks ----------------------------------------------------------------------------


@dataclass(eq=False)
class Track:
    track_id: int
    kalman: KalmanState
    accum: AccumulatedModel
    model_anchor: np.ndarray
    z_reference: tuple[float, float]
    pose: RigidMotion2D = RigidMotion2D()
    centroid_offset: np.ndarray = field(default_factory=lambda: np.zeros(2))
    is_mover: bool = False
    mover_streak: int = 0
    release_streak: int = 0
    miss_streak: int = 0
    last_score: float = float("nan")
    n_updates: int = 0
    tentative: bool = True
    model_time: float = 0.0
    last_points: int = 0
    # centroids of clusters the validation gate rejected since the last update
    vetoed_xy: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    # (t, x, y) of recent accepted measurements, newest last
    history: list = field(default_factory=list)

    @property
    def model(self) -> SurfaceDensity:
        return self.accum.density


class TrackRecord(NamedTuple):
    frame_id: int
    track_id: int
    x: float
    y: float
    vx: float
    vy: float
    speed: float
    is_mover: bool
    score: float
    points: int


def format_record(rec: TrackRecord) -> str:
    return "%d\t%d\t%.4f\t%.4f\t%.4f\t%.4f\t%.4f\t%d\t%.4f\t%d" % (
        rec.frame_id, rec.track_id, rec.x, rec.y, rec.vx, rec.vy, rec.speed, int(rec.is_mover), rec.score, rec.points,
    )


def parse_record(line: str) -> TrackRecord:
    f = line.rstrip("\n").split("\t")
    if len(f) != 10:
        raise ValueError(f"expected 10 tab-separated fields, got {len(f)}")
    return TrackRecord(
        int(f[0]), int(f[1]), float(f[2]), float(f[3]), float(f[4]), float(f[5]), float(f[6]),
        f[7] == "1", float(f[8]), int(f[9]),
    )


def write_records(records, fh: TextIO) -> None:
    for rec in records:
        fh.write(format_record(rec) + "\n")


def read_records(fh: TextIO) -> list[TrackRecord]:
    out = []
    for n, line in enumerate(fh, 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            out.append(parse_record(line))
        except ValueError as exc:
            raise ValueError(f"line {n}: {exc}") from None
    return out


def predict(track: Track, t: float, params: TrackerParams = TrackerParams()) -> KalmanState:
    """Predicted anchor position and covariance at ``t``; the track is not modified."""
    return kalman_predict(track.kalman, t, params.process_accel_sigma)


def _center_translation(pose: RigidMotion2D, anchor, center) -> np.ndarray:
    """Translation of the same rigid motion written about ``center`` instead of ``anchor``."""
    d = np.asarray(center)[:2] - np.asarray(anchor)[:2]
    return pose.translation + (rot2(pose.yaw) - np.eye(2)) @ d


def _anchor_pose(motion: RigidMotion2D, anchor, center) -> RigidMotion2D:
    d = np.asarray(center)[:2] - np.asarray(anchor)[:2]
    t = motion.translation - (rot2(motion.yaw) - np.eye(2)) @ d
    return RigidMotion2D(t[0], t[1], motion.yaw)


def footprint(
    track: Track, margin=0.0, pose: RigidMotion2D | None = None, min_weight: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Horizontal bounding box of the model at ``pose`` (default: the current pose).

    Components whose decayed weight is below ``min_weight`` are left out.
    """
    pose = track.pose if pose is None else pose
    model = track.model
    if min_weight <= 0.0:
        lo, hi = (b[:2] for b in model.bounds)
    else:
        centers = model.centers[model.weights >= min(min_weight, model.weights.max())]
        lo, hi = centers[:, :2].min(axis=0), centers[:, :2].max(axis=0)
    corners = np.array([[lo[0], lo[1], 0], [hi[0], lo[1], 0], [lo[0], hi[1], 0], [hi[0], hi[1], 0]])
    world = pose.apply(corners, track.model_anchor)[:, :2]
    return world.min(axis=0) - margin, world.max(axis=0) + margin


def object_position(track: Track) -> tuple[float, float]:
    """Center of the model's horizontal footprint at the filtered position.

    The anchor is wherever the first partial view put its centroid; the
    footprint center moves toward the object's middle as more sides are seen.
    """
    lo, hi = footprint(track, 0.0, predicted_pose(track, track.kalman), RECENT_WEIGHT)
    mid = 0.5 * (lo + hi)
    return float(mid[0]), float(mid[1])


def predicted_pose(track: Track, pred: KalmanState) -> RigidMotion2D:
    t = pred.position - track.model_anchor[:2]
    return RigidMotion2D(t[0], t[1], track.pose.yaw)


def gate_size(pred: KalmanState, params: TrackerParams) -> np.ndarray:
    return np.maximum(MIN_GATE, params.gate_inflation * pred.position_std)


def _model_center(track: Track) -> np.ndarray:
    return track.model.centroid()


def _search(track: Track, pred: KalmanState, params: TrackerParams, cluster: ObjectCluster | None = None):
    """Predicted motion (about the model centroid) and a search window clamped to the grid.

    A tentative track has no velocity yet, so its prediction is the shift of
    the candidate's centroid from the birth centroid.
    """
    c = _model_center(track)
    if track.tentative and cluster is not None:
        position = cluster.centroid[:2] - track.centroid_offset
    else:
        position = pred.position
    anchor_pose = RigidMotion2D(*(position - track.model_anchor[:2]), track.pose.yaw)
    t = _center_translation(anchor_pose, track.model_anchor, c)
    predicted = RigidMotion2D(t[0], t[1], track.pose.yaw)
    spec = track.accum.spec
    reach = gate_size(pred, params)
    limit = (np.asarray(spec.dims[:2]) - 1) * np.asarray(spec.cell_size[:2])
    rng = np.minimum(reach, limit)
    yaw_range = params.yaw_range if params.yaw_samples > 1 else 0.0
    return predicted, SearchWindow(float(rng[0]), float(rng[1]), params.yaw_samples, yaw_range), c


def _fit_grid(track: Track, pred: KalmanState, params: TrackerParams, config: RegistrationConfig) -> None:
    """Regrid the model when the gate outgrows the search range the current grid allows."""
    spec = track.accum.spec
    limit = (np.asarray(spec.dims[:2]) - 1) * np.asarray(spec.cell_size[:2])
    reach = gate_size(pred, params)
    if np.all(reach <= limit):
        return
    density = track.model
    spec = model_grid_spec(density, config, extra_margin=max(params.grid_margin, float(reach.max())))
    track.accum.set_grid(spec, smoothing_floor(spec, config))


def measurement(track: Track, registration: RegistrationResult) -> np.ndarray:
    """Registered anchor position: model anchor plus the translation about the anchor."""
    pose = _anchor_pose(registration.motion, track.model_anchor, _model_center(track))
    return track.model_anchor[:2] + pose.translation


def innovation_ok(
    track: Track, pred: KalmanState, registration: RegistrationResult, cluster: ObjectCluster, params: TrackerParams,
) -> bool:
    """Validation gate on the registered position.

    Passes inside ``gate_inflation`` standard deviations of the innovation
    (prediction plus measurement noise) or within INNOVATION_FLOOR meters.  A
    tentative track has no velocity yet and always passes.
    """
    if track.tentative:
        return True
    nu = measurement(track, registration) - pred.position
    if float(np.hypot(*nu)) <= INNOVATION_FLOOR:
        return True
    # occlusion inflation only down-weights the update; it does not widen the gate
    s = pred.covariance[:2, :2] + measurement_covariance(registration, params)
    return float(nu @ np.linalg.solve(s, nu)) <= params.gate_inflation**2


def _register(track: Track, cluster: ObjectCluster, pred: KalmanState, params, config) -> RegistrationResult | None:
    predicted, window, _ = _search(track, pred, params, cluster)
    try:
        return register(track.model, cluster, predicted, window, config, model_grid=track.accum.grid())
    except EmptyGridError:
        return None


def _near_vetoed(track: Track, centroid: np.ndarray) -> bool:
    """A stationary track does not take a cluster where its gate already turned one away.

    When a pole's own returns vanish, the pole next to it (rejected by the
    validation gate while both were visible) would otherwise pass the gate
    widened by the misses.
    """
    if track.is_mover or len(track.vetoed_xy) == 0:
        return False
    return bool(np.any(np.hypot(*(track.vetoed_xy - centroid).T) <= INNOVATION_FLOOR))


class Association(NamedTuple):
    matches: list  # (track, cluster, RegistrationResult)
    births: list  # clusters
    misses: list  # tracks


def associate(
    tracks: list[Track],
    clusters: list[ObjectCluster],
    t: float,
    params: TrackerParams = TrackerParams(),
    config: RegistrationConfig = RegistrationConfig(),
    pool: ThreadPoolExecutor | None = None,
) -> Association:
    """Gate clusters per track, register every in-gate candidate, and assign greedily.

    A track's preferred candidate is the best-scoring one when it beats the
    runner-up by ``ambiguity_margin``, otherwise the one nearest the prediction.
    Edges are taken in order of (preference rank, tentative last, score
    descending, track id, cluster index), each track and cluster used once.
    """
    tracks = sorted(tracks, key=lambda tr: tr.track_id)
    if not clusters:
        return Association([], [], list(tracks))
    centroids = np.array([c.centroid[:2] for c in clusters])
    box_lo = np.array([c.bbox_min[:2] for c in clusters])
    box_hi = np.array([c.bbox_max[:2] for c in clusters])
    preds = [predict(tr, t, params) for tr in tracks]

    jobs = []
    for ti, (tr, pred) in enumerate(zip(tracks, preds)):
        gate = gate_size(pred, params)
        _fit_grid(tr, pred, params, config)
        if tr.tentative:
            expect = pred.position + tr.centroid_offset
            inside = np.all(np.abs(centroids - expect) <= gate, axis=1)
        else:
            # partial views and a partial model put the centroid anywhere over
            # the object, so any overlap with the gated footprint is a candidate
            lo, hi = footprint(tr, gate, predicted_pose(tr, pred))
            inside = np.all((box_hi >= lo) & (box_lo <= hi), axis=1)
        for ci in np.nonzero(inside)[0]:
            jobs.append((ti, int(ci)))

    def run(job):
        ti, ci = job
        return _register(tracks[ti], clusters[ci], preds[ti], params, config)

    results = list(pool.map(run, jobs)) if pool is not None and len(jobs) > 1 else [run(j) for j in jobs]

    per_track: dict[int, list] = {}
    vetoed: dict[int, list] = {}
    for (ti, ci), res in zip(jobs, results):
        if res is None or res.score < params.min_score:
            continue  # a poor match signals occlusion or the wrong object
        if not innovation_ok(tracks[ti], preds[ti], res, clusters[ci], params):
            vetoed.setdefault(ti, []).append(centroids[ci])
            continue
        if _near_vetoed(tracks[ti], centroids[ci]):
            continue
        per_track.setdefault(ti, []).append((ci, res))

    edges = []
    for ti, cands in per_track.items():
        tr, pred = tracks[ti], preds[ti]
        expect = pred.position + tr.centroid_offset
        by_score = sorted(cands, key=lambda cr: (-cr[1].score, cr[0]))
        if len(by_score) > 1 and by_score[0][1].score - by_score[1][1].score < params.ambiguity_margin:
            dist = {ci: float(np.hypot(*(centroids[ci] - expect))) for ci, _ in cands}
            first = min(cands, key=lambda cr: (dist[cr[0]], cr[0]))
            by_score = [first] + [cr for cr in by_score if cr[0] != first[0]]
        for rank, (ci, res) in enumerate(by_score):
            edges.append((rank, int(tr.tentative), -res.score, tr.track_id, ci, ti, res))
    edges.sort(key=lambda e: e[:5])

    used_t, used_c, matches = set(), set(), []
    for _, _, _, _, ci, ti, res in edges:
        if ti in used_t or ci in used_c:
            continue
        used_t.add(ti)
        used_c.add(ci)
        matches.append((tracks[ti], clusters[ci], res))
    matches.sort(key=lambda m: m[0].track_id)
    for ti, tr in enumerate(tracks):
        seen = np.array(vetoed.get(ti, []), dtype=float).reshape(-1, 2)
        tr.vetoed_xy = seen if ti in used_t else np.concatenate([tr.vetoed_xy, seen])
    births = [c for i, c in enumerate(clusters) if i not in used_c]
    misses = [tr for i, tr in enumerate(tracks) if i not in used_t]
    return Association(matches, births, misses)


def _observation_batch(cluster: ObjectCluster, config: RegistrationConfig) -> SurfaceDensity:
    return build_density(cluster, config.k_sigma, config.sigma_floor, weight=1.0)


def _ensure_grid(track: Track, batch: SurfaceDensity, params: TrackerParams, config: RegistrationConfig) -> None:
    spec = track.accum.spec
    if spec is not None and spec.contains(batch.centers, margin=config.margin_sigmas * float(np.median(batch.sigmas))):
        return
    density = track.accum.density
    if len(density):
        density = SurfaceDensity(
            np.concatenate([density.centers, batch.centers]),
            np.concatenate([density.sigmas, batch.sigmas]),
            np.concatenate([density.weights, batch.weights]),
        )
    else:
        density = batch
    spec = model_grid_spec(density, config, extra_margin=params.grid_margin)
    track.accum.set_grid(spec, smoothing_floor(spec, config))


def new_track(
    track_id: int,
    cluster: ObjectCluster,
    t: float,
    params: TrackerParams = TrackerParams(),
    config: RegistrationConfig = RegistrationConfig(),
) -> Track:
    """Tentative track whose model frame is the world frame at ``t``."""
    centroid = cluster.centroid
    kalman = KalmanState.initial(centroid[:2], t, params.meas_sigma, params.initial_speed_sigma)
    track = Track(
        track_id=track_id,
        kalman=kalman,
        accum=AccumulatedModel(params.model_half_life),
        model_anchor=centroid.copy(),
        z_reference=(float(cluster.bbox_min[2]), float(cluster.bbox_max[2])),
        model_time=t,
        last_points=len(cluster),
    )
    batch = _observation_batch(cluster, config)
    _ensure_grid(track, batch, params, config)
    track.accum.add(batch, 0.0)
    return track


def speed_std(ks: KalmanState) -> float:
    """Standard deviation of the speed estimate, to first order along the velocity."""
    v = ks.velocity
    pv = ks.covariance[2:, 2:]
    speed = float(np.hypot(*v))
    if speed == 0.0:
        return float(np.sqrt(np.trace(pv) / 2.0))
    return float(np.sqrt(max(0.0, v @ pv @ v)) / speed)


def _reseed(track: Track, cluster: ObjectCluster, t: float, params: TrackerParams, config: RegistrationConfig) -> None:
    fresh = new_track(track.track_id, cluster, t, params, config)
    for name in ("kalman", "accum", "model_anchor", "z_reference", "pose", "centroid_offset", "model_time", "last_points", "history"):
        setattr(track, name, getattr(fresh, name))


def measured_speed(track: Track, window: int) -> float:
    """Least-squares speed through the last ``window`` measurements (0 with fewer).

    A track that hops onto a neighbouring object once carries a filtered
    velocity for a while, but its measurements stop moving right after the hop.
    """
    if len(track.history) < window:
        return 0.0
    h = np.array(track.history[-window:])
    t = h[:, 0] - h[:, 0].mean()
    denom = float(t @ t)
    if denom == 0.0:
        return 0.0
    v = t @ (h[:, 1:] - h[:, 1:].mean(axis=0)) / denom
    return float(np.hypot(*v))


def _update_mover(track: Track, params: TrackerParams) -> None:
    """Speed test with latch; updates inside the velocity warm-up do not count.

    The speed must also clear ``mover_sigmas`` standard deviations of its own
    estimate, so a sparsely sampled object's jitter is not read as motion.
    """
    speed = track.kalman.speed
    settled = track.n_updates > params.accel_warmup
    fast = speed > params.speed_min and speed > params.mover_sigmas * speed_std(track.kalman)
    fast = fast and measured_speed(track, params.confirm_frames + 1) > params.speed_min
    track.mover_streak = track.mover_streak + 1 if settled and fast else 0
    if not track.is_mover:
        if track.mover_streak >= params.confirm_frames:
            track.is_mover = True
            track.release_streak = 0
        return
    track.release_streak = track.release_streak + 1 if speed < 0.5 * params.speed_min else 0
    if track.release_streak >= params.confirm_frames:
        track.is_mover = False
        track.release_streak = 0


def measurement_covariance(
    registration: RegistrationResult, params: TrackerParams, cluster: ObjectCluster | None = None,
) -> np.ndarray:
    """meas_sigma^2 along the best-constrained direction, stretched along weak ones.

    A partial view such as a single flat face slides along itself at almost
    no cost in score; the variance along that direction grows by the ratio of
    peak curvatures, capped at ``aperture_cap``.  A cluster cut by a nearer
    occluder has an unreliable extent across the line of sight, so that
    variance grows by ``occlusion_inflation``.
    """
    r = params.meas_sigma**2 * np.eye(2)
    h = peak_curvature(registration)
    if h is not None:
        lam, vec = np.linalg.eigh(0.5 * (h + h.T))
        if lam[-1] > 0:
            ratio = np.minimum(params.aperture_cap, lam[-1] / np.maximum(lam, lam[-1] / params.aperture_cap))
            r = params.meas_sigma**2 * (vec * ratio) @ vec.T
    if cluster is not None and cluster.occluded:
        u = cluster.cross_range()
        if u is not None:
            r = r + (params.occlusion_inflation - 1.0) * float(u @ r @ u) * np.outer(u, u)
    return r


def record_miss(track: Track) -> None:
    track.miss_streak += 1
    track.last_points = 0


def update(
    track: Track,
    registration: RegistrationResult,
    cluster: ObjectCluster,
    t: float,
    params: TrackerParams = TrackerParams(),
    config: RegistrationConfig = RegistrationConfig(),
) -> Track:
    """Kalman update from the registered anchor position, then accumulate the cluster.

    An update implying acceleration above ``accel_limit`` is rejected and
    counted as a miss; the first ``accel_warmup`` updates are exempt while the
    velocity estimate settles.
    """
    if track.tentative:
        ratio = len(cluster) / max(track.last_points, 1)
        if not 1.0 / params.birth_size_ratio <= ratio <= params.birth_size_ratio:
            # the birth cluster was a different grouping (say, two objects that
            # touched in the scan); start over from this one
            _reseed(track, cluster, t, params, config)
            return track
    c = _model_center(track)
    pose = _anchor_pose(registration.motion, track.model_anchor, c)
    z = measurement(track, registration)
    prior = predict(track, t, params)
    post = kalman_update(prior, z, params.meas_sigma, measurement_covariance(registration, params, cluster))
    dt = t - track.kalman.last_update
    if track.n_updates >= params.accel_warmup and dt > 0:
        accel = float(np.hypot(*(post.velocity - prior.velocity))) / dt
        if accel > params.accel_limit:
            log.debug("track %d: update rejected, implied acceleration %.1f m/s^2", track.track_id, accel)
            track.kalman = prior
            record_miss(track)
            return track

    track.kalman = post
    track.pose = pose
    track.last_score = registration.score
    track.miss_streak = 0
    track.n_updates += 1
    track.tentative = False
    track.last_points = len(cluster)
    track.centroid_offset = cluster.centroid[:2] - post.position
    track.history = (track.history + [(t, float(z[0]), float(z[1]))])[-(params.confirm_frames + 1):]

    obs = _observation_batch(cluster, config)
    centers = registration.motion.invert_points(obs.centers, c)
    # hits far outside the model belong to something the cluster swallowed
    lo, hi = footprint(track, params.growth_margin, RigidMotion2D())
    keep = np.all((centers[:, :2] >= lo) & (centers[:, :2] <= hi), axis=1)
    if not keep.any():
        keep[:] = True
    batch = SurfaceDensity(centers[keep], obs.sigmas[keep], obs.weights[keep])
    _ensure_grid(track, batch, params, config)
    track.accum.add(batch, max(0.0, t - track.model_time))
    track.model_time = t
    _update_mover(track, params)
    return track


def prune(tracks: list[Track], t: float, params: TrackerParams = TrackerParams()) -> list[Track]:
    keep = []
    for tr in tracks:
        if tr.miss_streak > params.max_misses:
            if tr.is_mover:
                log.info("mover track %d dropped at t=%.3f", tr.track_id, t)
            continue
        keep.append(tr)
    return keep


class Tracker:
    """Frame-by-frame driver: associate, update, miss, birth, prune, report."""

    def __init__(
        self,
        params: TrackerParams = TrackerParams(),
        config: RegistrationConfig = RegistrationConfig(),
        threads: int = 1,
    ):
        self.params = params
        self.config = config
        self.tracks: list[Track] = []
        self.next_id = 1
        self.threads = threads
        self._pool = ThreadPoolExecutor(threads) if threads > 1 else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def step(self, clusters: list[ObjectCluster], t: float, frame_id: int) -> list[TrackRecord]:
        p, cfg = self.params, self.config
        assoc = associate(self.tracks, clusters, t, p, cfg, self._pool)
        births = list(assoc.births)
        for track, cluster, res in assoc.matches:
            update(track, res, cluster, t, p, cfg)
            if track.miss_streak > 0:
                births.append(cluster)  # rejected by the acceleration gate
        survivors = []
        for track in assoc.misses:
            if track.tentative:
                continue  # a birth needs support on the next frame
            track.kalman = predict(track, t, p)
            record_miss(track)
        for track in self.tracks:
            if not (track.tentative and track in assoc.misses):
                survivors.append(track)
        # a birth inside a confirmed track's gate is a piece of that object
        boxes = [
            footprint(tr, gate_size(tr.kalman, p) + p.fragment_margin, predicted_pose(tr, tr.kalman))
            for tr in survivors if not tr.tentative
        ]
        births.sort(key=lambda c: c.cluster_id)
        for cluster in births:
            c = cluster.centroid[:2]
            if any(np.all((lo <= c) & (c <= hi)) for lo, hi in boxes):
                continue  # a fragment of an object already tracked
            survivors.append(new_track(self.next_id, cluster, t, p, cfg))
            self.next_id += 1
        self.tracks = prune(survivors, t, p)

        records = []
        for tr in self.tracks:
            if tr.tentative:
                continue
            k = tr.kalman
            x, y = object_position(tr)
            records.append(TrackRecord(
                frame_id, tr.track_id, x, y, float(k.state[2]), float(k.state[3]),
                k.speed, tr.is_mover, tr.last_score, tr.last_points,
            ))
        return records
