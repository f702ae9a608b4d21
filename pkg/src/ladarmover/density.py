"""Surface densities: isotropic Gaussian mixtures on object hits and their grid discretization."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import TextIO

import numpy as np

from .clustering import ObjectCluster

TRUNCATE_SIGMAS = 4.0
PRUNE_WEIGHT = 0.01


class EmptyGridError(ValueError):
    """The grid received no density mass; the object lies outside it (or was occluded)."""


@dataclass(frozen=True, eq=False)
class SurfaceDensity:
    centers: np.ndarray
    sigmas: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=float).reshape(-1, 3)
        n = len(centers)
        sigmas = np.broadcast_to(np.asarray(self.sigmas, dtype=float), (n,)).copy()
        weights = np.broadcast_to(np.asarray(self.weights, dtype=float), (n,)).copy()
        if np.any(sigmas <= 0):
            raise ValueError("bandwidths must be positive")
        if np.any(weights < 0):
            raise ValueError("weights must be non-negative")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "sigmas", sigmas)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def empty(cls) -> "SurfaceDensity":
        return cls(np.empty((0, 3)), np.empty(0), np.empty(0))

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def total_weight(self) -> float:
        return float(self.weights.sum())

    def centroid(self) -> np.ndarray:
        return self._centroid.copy()

    @cached_property
    def _centroid(self) -> np.ndarray:
        return self.weights @ self.centers / self.weights.sum()

    @cached_property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Componentwise min and max of the centers."""
        return self.centers.min(axis=0), self.centers.max(axis=0)

    def transformed(self, rotation: np.ndarray, translation) -> "SurfaceDensity":
        """Apply ``x -> rotation @ x + translation`` to every component center."""
        return SurfaceDensity(self.centers @ np.asarray(rotation).T + translation, self.sigmas, self.weights)

    def with_min_sigma(self, floor: float) -> "SurfaceDensity":
        return SurfaceDensity(self.centers, np.maximum(self.sigmas, floor), self.weights)


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned grid; cell (0, 0, 0) spans ``origin`` to ``origin + cell_size``."""

    origin: tuple[float, float, float]
    cell_size: tuple[float, float, float]
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "cell_size", tuple(float(v) for v in self.cell_size))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        if min(self.cell_size) <= 0:
            raise ValueError("cell sizes must be positive")
        if min(self.dims) < 1:
            raise ValueError("grid dims must be >= 1")

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.cell_size))

    def centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.cell_size[axis]

    def padded(self, nx: int, ny: int, nz: int = 0) -> "GridSpec":
        """Same lattice, grown by the given number of cells on both sides of each axis."""
        pad = np.array([nx, ny, nz])
        origin = np.asarray(self.origin) - pad * np.asarray(self.cell_size)
        return GridSpec(tuple(origin), self.cell_size, tuple(np.asarray(self.dims) + 2 * pad))

    def contains(self, points: np.ndarray, margin=0.0) -> bool:
        lo = np.asarray(self.origin) + margin
        hi = np.asarray(self.origin) + np.asarray(self.dims) * np.asarray(self.cell_size) - margin
        points = np.asarray(points).reshape(-1, 3)
        return bool(np.all((points >= lo) & (points <= hi)))


@dataclass(frozen=True, eq=False)
class DensityGrid:
    spec: GridSpec
    mass: np.ndarray
    raw_total: float = field(default=1.0)

    def __post_init__(self):
        if self.mass.shape != self.spec.dims:
            raise ValueError(f"mass shape {self.mass.shape} does not match dims {self.spec.dims}")


def bandwidth_for_distance(sensor_distance, k_sigma: float = 0.01, sigma_floor: float = 0.05):
    d = np.asarray(sensor_distance, dtype=float)
    if np.any(d <= 0):
        raise ValueError("sensor distance must be positive")
    out = np.maximum(sigma_floor, k_sigma * d)
    return float(out) if out.ndim == 0 else out


def build_density(
    cluster: ObjectCluster,
    k_sigma: float = 0.01,
    sigma_floor: float = 0.05,
    weight: float | None = None,
) -> SurfaceDensity:
    """One Gaussian per hit; uniform weights of ``1/n`` unless ``weight`` is given."""
    points = cluster.points if isinstance(cluster, ObjectCluster) else cluster
    n = len(points)
    if n == 0:
        raise ValueError("cannot build a density from an empty cluster")
    sigmas = bandwidth_for_distance(points.sensor_distance, k_sigma, sigma_floor)
    return SurfaceDensity(points.xyz.copy(), sigmas, np.full(n, 1.0 / n if weight is None else weight))


def evaluate_density(density: SurfaceDensity, x) -> np.ndarray | float:
    x = np.asarray(x, dtype=float)
    pts = x.reshape(-1, 3)
    w = density.weights / density.total_weight
    s2 = density.sigmas**2
    d2 = ((pts[:, None, :] - density.centers[None, :, :]) ** 2).sum(axis=-1)
    values = (w * (2.0 * np.pi * s2) ** -1.5 * np.exp(-d2 / (2.0 * s2))).sum(axis=1)
    return float(values[0]) if x.ndim == 1 else values.reshape(x.shape[:-1])


def _stencil_mass(density, spec, scale, truncate=TRUNCATE_SIGMAS, max_elems=1 << 22):
    """Flat cell indices and (unnormalized) masses contributed by every component.

    ``scale`` multiplies each component's Gaussian mass; contributions farther
    than ``truncate`` bandwidths (Euclidean) from the component center are dropped.
    """
    origin = np.asarray(spec.origin)
    cell = np.asarray(spec.cell_size)
    dims = np.asarray(spec.dims)
    reach = np.ceil(truncate * density.sigmas[:, None] / cell[None, :]).astype(np.int64)
    center_idx = np.floor((density.centers - origin) / cell).astype(np.int64)
    out_idx, out_val = [], []
    # bucket components with equal stencil size so each bucket is one broadcast
    if np.all(reach == reach[:1]):
        keys, inverse = reach[:1], np.zeros(len(reach), dtype=np.int64)
    else:
        code = (reach[:, 0] * 4096 + reach[:, 1]) * 4096 + reach[:, 2]
        _, first, inverse = np.unique(code, return_index=True, return_inverse=True)
        keys = reach[first]
    for b, (kx, ky, kz) in enumerate(keys):
        members = np.nonzero(inverse == b)[0]
        offs = [np.arange(-k, k + 1) for k in (kx, ky, kz)]
        stencil = (2 * kx + 1) * (2 * ky + 1) * (2 * kz + 1)
        step = max(1, max_elems // stencil)
        for start in range(0, len(members), step):
            m = members[start : start + step]
            sig = density.sigmas[m]
            inv2s2 = 1.0 / (2.0 * sig**2)
            idx_axes, g_axes, ok_axes = [], [], []
            inside = True
            for a in range(3):
                idx = center_idx[m, a, None] + offs[a][None, :]
                d = origin[a] + (idx + 0.5) * cell[a] - density.centers[m, a, None]
                idx_axes.append(idx)
                g_axes.append(np.exp(-d * d * inv2s2[:, None]))
                ok_axes.append((idx >= 0) & (idx < dims[a]))
                inside = inside and bool(ok_axes[-1].all())
            # product of the axis factors is exp(-d^2 / 2 sigma^2); truncating it
            # at exp(-truncate^2 / 2) keeps the ball of radius truncate * sigma
            g = g_axes[0][:, :, None, None] * g_axes[1][:, None, :, None] * g_axes[2][:, None, None, :]
            ok = g >= np.exp(-0.5 * truncate * truncate)
            if not inside:
                ok &= ok_axes[0][:, :, None, None] & ok_axes[1][:, None, :, None] & ok_axes[2][:, None, None, :]
            amp = scale[m] * (2.0 * np.pi * sig**2) ** -1.5 * spec.cell_volume
            val = amp[:, None, None, None] * g
            flat = (idx_axes[0][:, :, None, None] * dims[1] + idx_axes[1][:, None, :, None]) * dims[2] + idx_axes[2][:, None, None, :]
            out_idx.append(flat[ok])
            out_val.append(val[ok])
    if not out_idx:
        return np.empty(0, dtype=np.int64), np.empty(0)
    return np.concatenate(out_idx), np.concatenate(out_val)


def discretize_unnormalized(density: SurfaceDensity, spec: GridSpec, scale=None, truncate=TRUNCATE_SIGMAS) -> np.ndarray:
    """Cell-center density times cell volume, before renormalization."""
    if scale is None:
        scale = density.weights / density.total_weight if len(density) else np.empty(0)
    scale = np.asarray(scale, dtype=float)
    n = int(np.prod(spec.dims))
    idx, val = _stencil_mass(density, spec, scale, truncate)
    return np.bincount(idx, weights=val, minlength=n).reshape(spec.dims)


def discretize(density: SurfaceDensity, spec: GridSpec, truncate: float = TRUNCATE_SIGMAS) -> DensityGrid:
    """Bin the mixture onto ``spec`` and renormalize to unit total mass."""
    if len(density) == 0 or density.total_weight <= 0:
        raise EmptyGridError("density has no components")
    mass = discretize_unnormalized(density, spec, truncate=truncate)
    total = float(mass.sum())
    if total <= 0:
        raise EmptyGridError("grid does not overlap the density support")
    return DensityGrid(spec, mass / total, raw_total=total)


def normalize_grid(spec: GridSpec, mass: np.ndarray) -> DensityGrid:
    mass = np.maximum(mass, 0.0)
    total = float(mass.sum())
    if total <= 0:
        raise EmptyGridError("grid holds no mass")
    return DensityGrid(spec, mass / total, raw_total=total)


def decay_factor(dt: float, half_life: float) -> float:
    if dt < 0:
        raise ValueError("dt must be non-negative")
    return 2.0 ** (-dt / half_life)


def accumulate(
    model: SurfaceDensity,
    new: SurfaceDensity,
    dt: float,
    half_life: float,
    prune_below: float = PRUNE_WEIGHT,
) -> SurfaceDensity:
    """Decay the old components by the half-life rule, append ``new`` at weight 1, prune light ones.

    ``new`` must already be expressed in the model frame.
    """
    weights = model.weights * decay_factor(dt, half_life)
    keep = weights >= prune_below
    return SurfaceDensity(
        np.concatenate([model.centers[keep], new.centers]),
        np.concatenate([model.sigmas[keep], new.sigmas]),
        np.concatenate([weights[keep], np.ones(len(new))]),
    )


class AccumulatedModel:
    """A decaying surface model plus its discretization on a fixed grid, kept in sync.

    Components are stored in batches (one per observation) because every
    component of a batch carries the same weight; the grid is updated
    incrementally instead of being rediscretized from scratch each frame.
    """

    def __init__(self, half_life: float, smoothing_floor: float = 0.0, prune_below: float = PRUNE_WEIGHT):
        self.half_life = half_life
        self.smoothing_floor = smoothing_floor
        self.prune_below = prune_below
        self.batches: list[SurfaceDensity] = []
        self.batch_weights: list[float] = []
        self.spec: GridSpec | None = None
        self._mass: np.ndarray | None = None
        self._parts: list[np.ndarray] = []  # per-batch grid mass at weight 1
        self._density: SurfaceDensity | None = None

    def __len__(self) -> int:
        return sum(len(b) for b in self.batches)

    @property
    def density(self) -> SurfaceDensity:
        if self._density is None:
            if not self.batches:
                self._density = SurfaceDensity.empty()
            else:
                self._density = SurfaceDensity(
                    np.concatenate([b.centers for b in self.batches]),
                    np.concatenate([b.sigmas for b in self.batches]),
                    np.concatenate([np.full(len(b), w) for b, w in zip(self.batches, self.batch_weights)]),
                )
        return self._density

    def _contribution(self, batch: SurfaceDensity) -> np.ndarray:
        smoothed = batch.with_min_sigma(self.smoothing_floor)
        return discretize_unnormalized(smoothed, self.spec, scale=np.ones(len(batch)))

    def _deposit(self, contribution: np.ndarray, w: float) -> None:
        self._mass += w * contribution

    def set_grid(self, spec: GridSpec, smoothing_floor: float | None = None) -> None:
        self.spec = spec
        if smoothing_floor is not None:
            self.smoothing_floor = smoothing_floor
        self._mass = np.zeros(spec.dims)
        self._parts = [self._contribution(b) for b in self.batches]
        for part, w in zip(self._parts, self.batch_weights):
            self._deposit(part, w)

    def add(self, batch: SurfaceDensity, dt: float) -> None:
        f = decay_factor(dt, self.half_life)
        weights = [w * f for w in self.batch_weights]
        kept = [i for i, w in enumerate(weights) if w >= self.prune_below]
        if self._mass is not None:
            self._mass *= f
            for i in range(len(weights)):
                if weights[i] < self.prune_below:
                    self._deposit(self._parts[i], -weights[i])
            self._parts = [self._parts[i] for i in kept] + [self._contribution(batch)]
            self._deposit(self._parts[-1], 1.0)
        self.batches = [self.batches[i] for i in kept] + [batch]
        self.batch_weights = [weights[i] for i in kept] + [1.0]
        self._density = None

    def grid(self) -> DensityGrid:
        if self.spec is None:
            raise EmptyGridError("model has no grid yet")
        return normalize_grid(self.spec, self._mass)


def dump_grid(grid: DensityGrid, fh: TextIO) -> None:
    spec = grid.spec
    fh.write("grid\t%d\t%d\t%d\n" % spec.dims)
    fh.write("cell\t%.9g\t%.9g\t%.9g\n" % spec.cell_size)
    fh.write("origin\t%.9g\t%.9g\t%.9g\n" % spec.origin)
    for value in grid.mass.ravel():
        fh.write(f"{value:.9e}\n")
