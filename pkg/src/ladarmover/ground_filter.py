"""Ground removal by local, roughly horizontal plane fits on a horizontal tiling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scan_geometry import PointCloud


@dataclass(frozen=True)
class GroundParams:
    cell_size: float = 2.0
    height_tolerance: float = 0.15
    max_tilt: float = np.deg2rad(20.0)
    min_points_per_cell: int = 5
    refit_iterations: int = 2
    neighbor_rings: int = 2
    seed_band: float = 0.3

    def __post_init__(self):
        if self.cell_size <= 0 or self.height_tolerance <= 0:
            raise ValueError("cell_size and height_tolerance must be positive")
        if not 0 <= self.max_tilt < np.pi / 2:
            raise ValueError("max_tilt must lie in [0, pi/2)")
        if self.min_points_per_cell < 1:
            raise ValueError("min_points_per_cell must be >= 1")


# Slope prior, as a length relative to cell size: adds n * (RIDGE_LENGTH * cell)^2
# to the slope normal equations.  Negligible for hits spread over a cell, but pins
# degenerate cells (a single scan arc of ground hits) close to level.
RIDGE_LENGTH = 0.05


def _fit_planes(u, v, z, cell, n_cells, use, cell_size):
    """Batched least-squares fit of z = a*u + b*v + c per cell over points in ``use``."""
    w = use.astype(float)
    s = lambda values: np.bincount(cell, weights=w * values, minlength=n_cells)  # noqa: E731
    n = s(np.ones_like(u))
    su, sv, sz = s(u), s(v), s(z)
    suu, suv, svv = s(u * u), s(u * v), s(v * v)
    suz, svz = s(u * z), s(v * z)
    safe_n = np.maximum(n, 1.0)
    # centred moments keep the 3x3 systems well conditioned
    cuu = suu - su * su / safe_n
    cuv = suv - su * sv / safe_n
    cvv = svv - sv * sv / safe_n
    cuz = suz - su * sz / safe_n
    cvz = svz - sv * sz / safe_n
    ridge = n * (RIDGE_LENGTH * cell_size) ** 2 + 1e-12
    det = (cuu + ridge) * (cvv + ridge) - cuv * cuv
    a = ((cvv + ridge) * cuz - cuv * cvz) / det
    b = ((cuu + ridge) * cvz - cuv * cuz) / det
    c = (sz - a * su - b * sv) / safe_n
    return a, b, c, n


def _encode(ij: np.ndarray) -> np.ndarray:
    return ij[:, 0] * (1 << 32) + ij[:, 1]


def _lookup(sorted_codes, values, queries):
    """values[k] where sorted_codes[k] == query, else -1 (sorted_codes ascending)."""
    pos = np.clip(np.searchsorted(sorted_codes, queries), 0, len(sorted_codes) - 1)
    return np.where(sorted_codes[pos] == queries, values[pos], -1)


def _cell_planes(u, v, z, cell, n_cells, params: GroundParams):
    """Seeded, iteratively refit plane per cell plus a per-cell validity flag."""
    counts = np.bincount(cell, minlength=n_cells)
    # rank of each point by height inside its cell (ties broken by coordinates for order independence)
    order = np.lexsort((u, v, z, cell))
    first = np.concatenate(([0], np.cumsum(counts)[:-1]))
    rank = np.empty(len(z), dtype=np.int64)
    rank[order] = np.arange(len(z)) - first[cell[order]]
    n_seed = np.maximum(3, np.ceil(counts / 4.0)).astype(np.int64)
    zmin = np.full(n_cells, np.inf)
    np.minimum.at(zmin, cell, z)
    # seeds: lowest quartile, minus anything well above the cell floor (object bases)
    use = (rank < n_seed[cell]) & ((z <= zmin[cell] + params.seed_band) | (rank < 3))

    a, b, c, n_used = _fit_planes(u, v, z, cell, n_cells, use, params.cell_size)
    for _ in range(params.refit_iterations):
        residual = np.abs(z - (a[cell] * u + b[cell] * v + c[cell]))
        use = residual < params.height_tolerance
        a, b, c, n_used = _fit_planes(u, v, z, cell, n_cells, use, params.cell_size)

    tilt = np.arctan(np.hypot(a, b))
    good = (counts >= params.min_points_per_cell) & (tilt <= params.max_tilt) & (n_used >= 3)
    return a, b, c, good, counts


def classify_ground(points: PointCloud, params: GroundParams = GroundParams()) -> np.ndarray:
    """Boolean label per point, True where the point lies on a local ground plane.

    Each horizontal cell is fitted from its lowest quartile of points, then refit
    on the points within ``height_tolerance`` of the current plane.  Cells whose
    plane is too steep keep all their points.  Cells with too few points are
    refit from their surrounding block of cells (3x3, then 5x5, up to
    ``neighbor_rings``), which rescues sparse far-range ground.
    """
    xyz = points.xyz if isinstance(points, PointCloud) else np.asarray(points, dtype=float).reshape(-1, 3)
    if len(xyz) == 0:
        raise ValueError("classify_ground needs at least one point")
    cs = params.cell_size
    ij = np.floor(xyz[:, :2] / cs).astype(np.int64)
    # coordinates relative to the cell corner, so labels are unchanged by whole-cell shifts
    u = xyz[:, 0] - ij[:, 0] * cs
    v = xyz[:, 1] - ij[:, 1] * cs
    z = xyz[:, 2]
    _, first, cell = np.unique(_encode(ij), return_index=True, return_inverse=True)
    keys = ij[first]
    cell = cell.reshape(-1)
    n_cells = len(keys)

    a, b, c, good, counts = _cell_planes(u, v, z, cell, n_cells, params)
    labels = good[cell] & (np.abs(z - (a[cell] * u + b[cell] * v + c[cell])) < params.height_tolerance)

    sparse = counts < params.min_points_per_cell
    for ring in range(1, params.neighbor_rings + 1):
        if not sparse.any():
            break
        targets = np.nonzero(sparse)[0]
        target_codes = _encode(keys[targets])
        # copy every point into each sparse target cell whose block contains it
        src, dst = [], []
        for di in range(-ring, ring + 1):
            for dj in range(-ring, ring + 1):
                hit = _lookup(target_codes, targets, _encode(keys + np.array([di, dj])))
                ok = hit[cell] >= 0
                src.append(np.nonzero(ok)[0])
                dst.append(hit[cell][ok])
        src = np.concatenate(src)
        dst = np.concatenate(dst)
        remap = np.full(n_cells, -1)
        remap[targets] = np.arange(len(targets))
        tcell = remap[dst]
        tu = xyz[src, 0] - keys[dst, 0] * cs
        tv = xyz[src, 1] - keys[dst, 1] * cs
        ta, tb, tc, tgood, tcounts = _cell_planes(tu, tv, z[src], tcell, len(targets), params)
        own = remap[cell] >= 0
        k = remap[cell[own]]
        resid = np.abs(z[own] - (ta[k] * u[own] + tb[k] * v[own] + tc[k]))
        labels[own] = tgood[k] & (resid < params.height_tolerance)
        sparse[targets[tcounts >= params.min_points_per_cell]] = False
    return labels
