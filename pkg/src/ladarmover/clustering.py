"""Region growing over the angle-depth grid with a depth-proportional join threshold.

Mean-shift clustering was tried as an alternative and rejected: clusters depend
on the window size, so walls break into window-sized pieces.  Not implemented.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .scan_geometry import LadarFrame, PointCloud, SensorPose, project_frame


@dataclass(frozen=True)
class ClusterParams:
    dt_coefficient: float = 0.03
    dt_floor: float = 0.1
    min_cluster_points: int = 5
    neighborhood: int = 8
    # joining across an occluder's shadow within a row; 0 disables it
    bridge_gap: int = 0
    bridge_distance: float = 2.5
    # joining grazing-angle surfaces whose row samples are collinear
    continuation: bool = False

    def __post_init__(self):
        if self.dt_coefficient <= 0:
            raise ValueError("dt_coefficient must be positive")
        if self.dt_floor < 0:
            raise ValueError("dt_floor must be non-negative")
        if self.min_cluster_points < 1:
            raise ValueError("min_cluster_points must be >= 1")
        if self.neighborhood not in (4, 8):
            raise ValueError("neighborhood must be 4 or 8")
        if self.bridge_gap < 0:
            raise ValueError("bridge_gap must be non-negative")
        if self.bridge_distance <= 0:
            raise ValueError("bridge_distance must be positive")


@dataclass(frozen=True, eq=False)
class ObjectCluster:
    cluster_id: int
    points: PointCloud
    # a nearer surface borders the cluster in the scan, so part may be hidden
    occluded: bool = False
    sensor_xy: tuple[float, float] | None = None

    def __post_init__(self):
        if len(self.points) == 0:
            raise ValueError("a cluster needs at least one point")

    @property
    def centroid(self) -> np.ndarray:
        return self.points.xyz.mean(axis=0)

    def cross_range(self) -> np.ndarray | None:
        """Horizontal unit vector across the line of sight, if the sensor position is known."""
        if self.sensor_xy is None:
            return None
        d = self.centroid[:2] - np.asarray(self.sensor_xy, dtype=float)
        n = float(np.hypot(*d))
        if n == 0.0:
            return None
        return np.array([-d[1], d[0]]) / n

    @property
    def mean_sensor_distance(self) -> float:
        return float(self.points.sensor_distance.mean())

    @property
    def bbox_min(self) -> np.ndarray:
        return self.points.xyz.min(axis=0)

    @property
    def bbox_max(self) -> np.ndarray:
        return self.points.xyz.max(axis=0)

    def __len__(self) -> int:
        return len(self.points)


def depth_threshold(depth, params: ClusterParams = ClusterParams()):
    depth = np.asarray(depth, dtype=float)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    out = np.maximum(params.dt_floor, params.dt_coefficient * depth)
    return float(out) if out.ndim == 0 else out


def _offsets(neighborhood: int):
    if neighborhood == 4:
        return [(0, 1), (1, 0)]
    return [(0, 1), (1, 0), (1, 1), (1, -1)]


def _bridge_edges(ranges, valid, params: ClusterParams, az_step: float, elevations) -> tuple[np.ndarray, np.ndarray]:
    """Same-row joins across a run of cells hidden behind a nearer occluder.

    Cells a and b, ``g`` columns apart, join when every cell between them is a
    finite return nearer than min(r_a, r_b) - d_T, the range step is within
    (g + 1) d_T, and the two hits are at most ``bridge_distance`` apart.
    """
    rows, cols = ranges.shape
    flat = np.arange(rows * cols).reshape(rows, cols)
    gap_ranges = np.where(np.isfinite(ranges), ranges, np.inf)
    cos2 = np.cos(np.asarray(elevations, dtype=float))[:, None] ** 2
    src, dst = [], []
    gap_max = None
    for g in range(1, min(params.bridge_gap, cols - 2) + 1):
        # farthest cell strictly between columns c and c + g + 1
        nxt = gap_ranges[:, g : cols - 1]
        gap_max = nxt if gap_max is None else np.maximum(gap_max[:, : cols - 1 - g], nxt)
        ra, rb = ranges[:, : cols - g - 1], ranges[:, g + 1 :]
        both = valid[:, : cols - g - 1] & valid[:, g + 1 :]
        near = np.minimum(ra, rb, where=both, out=np.ones_like(ra))
        dt = np.maximum(params.dt_floor, params.dt_coefficient * near)
        join = both & (gap_max < near - dt) & (np.abs(ra - rb) < (g + 1) * dt)
        cosang = cos2 * np.cos((g + 1) * az_step) + (1.0 - cos2)
        chord2 = ra**2 + rb**2 - 2.0 * ra * rb * cosang
        join &= chord2 <= params.bridge_distance**2
        src.append(flat[:, : cols - g - 1][join])
        dst.append(flat[:, g + 1 :][join])
    if not src:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(src), np.concatenate(dst)


CONTINUATION_SLOPE = 0.1  # allowed off-line deviation per unit span


def _continuation_edges(ranges, valid, params: ClusterParams, az_step: float, elevations) -> tuple[np.ndarray, np.ndarray]:
    """Same-row joins along a surface seen at a grazing angle.

    Consecutive samples on a flat side far from the sensor can be farther
    apart in range than d_T.  Three consecutive cells whose horizontal
    positions are collinear (the middle one between the outer two, off the
    line by at most CONTINUATION_SLOPE times their span) and at most
    ``bridge_distance`` apart are joined.
    """
    rows, cols = ranges.shape
    if cols < 3:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    flat = np.arange(rows * cols).reshape(rows, cols)
    r = np.where(valid, ranges, 0.0) * np.cos(np.asarray(elevations, dtype=float))[:, None]
    az = np.arange(cols) * az_step
    x, y = r * np.cos(az), r * np.sin(az)
    s0, s1, s2 = slice(0, cols - 2), slice(1, cols - 1), slice(2, cols)
    ok = valid[:, s0] & valid[:, s1] & valid[:, s2]
    ux, uy = x[:, s2] - x[:, s0], y[:, s2] - y[:, s0]
    vx, vy = x[:, s1] - x[:, s0], y[:, s1] - y[:, s0]
    span2 = ux * ux + uy * uy
    along = (ux * vx + uy * vy) / np.where(span2 > 0, span2, 1.0)
    off = np.abs(ux * vy - uy * vx) / np.sqrt(np.where(span2 > 0, span2, 1.0))
    d01 = np.hypot(vx, vy)
    d12 = np.hypot(x[:, s2] - x[:, s1], y[:, s2] - y[:, s1])
    ok &= (span2 > 0) & (along > 0.0) & (along < 1.0)
    ok &= off <= CONTINUATION_SLOPE * np.sqrt(span2)
    ok &= (d01 <= params.bridge_distance) & (d12 <= params.bridge_distance)
    mid = flat[:, s1][ok]
    return np.concatenate([flat[:, s0][ok], mid]), np.concatenate([mid, flat[:, s2][ok]])


def label_grid(
    ranges: np.ndarray,
    mask: np.ndarray,
    params: ClusterParams = ClusterParams(),
    az_step: float | None = None,
    elevations=None,
) -> np.ndarray:
    """Component label per grid cell (-1 where unused), numbered in row-major scan order.

    Components smaller than ``min_cluster_points`` are also set to -1.  Shadow
    bridging and surface continuation need the beam geometry (``az_step`` and
    per-row ``elevations``) and are skipped without it.
    """
    ranges = np.asarray(ranges, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != ranges.shape:
        raise ValueError(f"mask shape {mask.shape} does not match frame shape {ranges.shape}")
    rows, cols = ranges.shape
    valid = mask & np.isfinite(ranges)
    flat = np.arange(rows * cols).reshape(rows, cols)
    src, dst = [], []
    for dr, dc in _offsets(params.neighborhood):
        r0, r1 = 0, rows - dr
        c0, c1 = max(0, -dc), cols - max(0, dc)
        a = (slice(r0, r1), slice(c0, c1))
        b = (slice(r0 + dr, r1 + dr), slice(c0 + dc, c1 + dc))
        ra, rb = ranges[a], ranges[b]
        both = valid[a] & valid[b]
        near = np.minimum(ra, rb, where=both, out=np.ones_like(ra))
        join = both & (np.abs(ra - rb) < np.maximum(params.dt_floor, params.dt_coefficient * near))
        src.append(flat[a][join])
        dst.append(flat[b][join])
    if params.bridge_gap > 0 and az_step is not None:
        if elevations is None:
            elevations = np.zeros(rows)
        bs, bd = _bridge_edges(ranges, valid, params, az_step, elevations)
        src.append(bs)
        dst.append(bd)
    if params.continuation and az_step is not None:
        if elevations is None:
            elevations = np.zeros(rows)
        cs, cd = _continuation_edges(ranges, valid, params, az_step, elevations)
        src.append(cs)
        dst.append(cd)
    src = np.concatenate(src)
    dst = np.concatenate(dst)
    n = rows * cols
    graph = coo_matrix((np.ones(len(src), dtype=np.int8), (src, dst)), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    comp = np.where(valid.ravel(), comp, -1)

    used = comp[comp >= 0]
    if used.size == 0:
        return np.full((rows, cols), -1, dtype=np.int64)
    sizes = np.bincount(used)
    keep = sizes >= params.min_cluster_points
    # renumber surviving components by their first cell in scan order
    first_cell = np.full(len(sizes), n, dtype=np.int64)
    np.minimum.at(first_cell, used, np.nonzero(comp >= 0)[0])
    kept_ids = np.nonzero(keep)[0]
    kept_ids = kept_ids[np.argsort(first_cell[kept_ids], kind="stable")]
    relabel = np.full(len(sizes), -1, dtype=np.int64)
    relabel[kept_ids] = np.arange(len(kept_ids))
    labels = np.where(comp >= 0, relabel[np.maximum(comp, 0)], -1)
    return labels.reshape(rows, cols)


OCCLUSION_MIN_ROWS = 2


def occluded_labels(ranges: np.ndarray, labels: np.ndarray, params: ClusterParams = ClusterParams()) -> np.ndarray:
    """Per label, whether at least OCCLUSION_MIN_ROWS row ends touch a nearer return.

    A cluster cell whose left or right neighbour belongs elsewhere and is
    nearer by more than d_T sits on an occlusion boundary.
    """
    n = int(labels.max()) + 1 if labels.size else 0
    counts = np.zeros(max(n, 0), dtype=np.int64)
    if n == 0:
        return counts.astype(bool)
    finite = np.where(np.isfinite(ranges), ranges, np.inf)
    for a, b in ((slice(1, None), slice(None, -1)), (slice(None, -1), slice(1, None))):
        lab, other = labels[:, a], labels[:, b]
        r, rn = finite[:, a], finite[:, b]
        safe_r = np.where(np.isfinite(r), r, 1.0)
        dt = np.maximum(params.dt_floor, params.dt_coefficient * safe_r)
        edge = (lab >= 0) & (other != lab) & (rn < r - dt)
        np.add.at(counts, lab[edge], 1)
    return counts >= OCCLUSION_MIN_ROWS


def cluster_frame(
    frame: LadarFrame,
    nonground: np.ndarray,
    pose: SensorPose,
    params: ClusterParams = ClusterParams(),
) -> list[ObjectCluster]:
    labels = label_grid(frame.ranges, nonground, params, frame.az_step, frame.elevations())
    cloud = project_frame(frame, pose)
    cell_label = labels[cloud.rows, cloud.cols]
    in_cluster = cell_label >= 0
    cloud = cloud.subset(in_cluster)
    cell_label = cell_label[in_cluster]
    order = np.argsort(cell_label, kind="stable")
    bounds = np.searchsorted(cell_label[order], np.arange(labels.max() + 2))
    occluded = occluded_labels(frame.ranges, labels, params)
    sensor_xy = (float(pose.position[0]), float(pose.position[1]))
    return [
        ObjectCluster(k, cloud.subset(order[bounds[k] : bounds[k + 1]]), bool(occluded[k]), sensor_xy)
        for k in range(len(bounds) - 1)
    ]


def nonground_mask(frame: LadarFrame, cloud: PointCloud, ground: np.ndarray) -> np.ndarray:
    """Per-cell mask of finite returns that were not labeled ground."""
    mask = np.zeros(frame.shape, dtype=bool)
    mask[cloud.rows[~ground], cloud.cols[~ground]] = True
    return mask
