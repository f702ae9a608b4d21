"""Register an observed cluster to an accumulated surface model by maximizing the
Bhattacharyya similarity over horizontal translation and yaw.

Motion convention: a :class:`RigidMotion2D` maps model-frame points to where the
object is observed, ``p -> R(yaw) (p - c) + c + t`` with ``c`` the horizontal
model centroid.  Only x and y move; z is untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, TextIO

import numpy as np

from .clustering import ObjectCluster
from .density import (
    DensityGrid,
    EmptyGridError,
    GridSpec,
    SurfaceDensity,
    build_density,
    discretize,
    discretize_unnormalized,
)


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def rot2(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class RigidMotion2D:
    tx: float = 0.0
    ty: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty])

    def apply(self, points: np.ndarray, center) -> np.ndarray:
        pts = np.array(points, dtype=float, copy=True).reshape(-1, 3)
        c = np.asarray(center, dtype=float)[:2]
        pts[:, :2] = (pts[:, :2] - c) @ rot2(self.yaw).T + c + self.translation
        return pts

    def invert_points(self, points: np.ndarray, center) -> np.ndarray:
        pts = np.array(points, dtype=float, copy=True).reshape(-1, 3)
        c = np.asarray(center, dtype=float)[:2]
        pts[:, :2] = (pts[:, :2] - c - self.translation) @ rot2(self.yaw) + c
        return pts


@dataclass(frozen=True)
class SearchWindow:
    tx_range: float
    ty_range: float
    yaw_samples: int = 1
    yaw_range: float = 0.0

    def __post_init__(self):
        if self.tx_range <= 0 or self.ty_range <= 0:
            raise ValueError("translation ranges must be positive")
        if self.yaw_samples not in (1, 3, 4, 5):
            raise ValueError("yaw_samples must be one of 1, 3, 4, 5")
        if self.yaw_samples > 1 and self.yaw_range <= 0:
            raise ValueError("yaw_range must be positive when sampling rotations")

    def yaw_offsets(self) -> np.ndarray:
        """Evenly spaced yaw offsets that always include zero."""
        n = self.yaw_samples
        if n == 1:
            return np.zeros(1)
        half = n // 2
        step = self.yaw_range / half
        return step * np.arange(-half, n - half)


@dataclass(frozen=True)
class RegistrationConfig:
    k_sigma: float = 0.01
    sigma_floor: float = 0.05
    vertical_slices: int = 7
    budget_slices: int = 3
    low_budget: bool = False
    max_cells_xy: int = 40
    margin_sigmas: float = 3.0
    smoothing: float = 0.5

    @property
    def slices(self) -> int:
        return self.budget_slices if self.low_budget else self.vertical_slices


@dataclass(eq=False)
class RegistrationResult:
    motion: RigidMotion2D
    score: float
    score_surface: np.ndarray = field(repr=False)
    converged: bool
    offsets: tuple[np.ndarray, np.ndarray, np.ndarray] = field(default=None, repr=False)
    peak: tuple[int, int, int] | None = None
    layer_yaw: float = 0.0


class PeakRefinement(NamedTuple):
    offset: np.ndarray
    score: float
    converged: bool


# --- similarity ------------------------------------------------------------------


def _support_box(density: SurfaceDensity, n_sigmas: float):
    s = density.sigmas[:, None]
    return (density.centers - n_sigmas * s).min(axis=0), (density.centers + n_sigmas * s).max(axis=0)


def _separable_factors(density: SurfaceDensity, axes):
    """Per-component 1D Gaussian factors on each quadrature axis; their outer product is the density."""
    w = density.weights / density.total_weight
    s = density.sigmas
    norm = w * (2.0 * np.pi * s**2) ** -1.5
    out = []
    for a, x in enumerate(axes):
        d = x[None, :] - density.centers[:, a, None]
        out.append(np.exp(-d * d / (2.0 * s[:, None] ** 2)))
    out[0] = out[0] * norm[:, None]
    return out


def bhattacharyya_continuous(
    a: SurfaceDensity,
    b: SurfaceDensity,
    quadrature_cell: float | None = None,
    max_slab: int = 1 << 21,
) -> float:
    """Riemann-sum quadrature of the integral of sqrt(p_a * p_b) over space.

    Used as a reference for the grid path; evaluates each isotropic component as a
    product of 1D Gaussians on a fine lattice (default spacing sigma_min / 4).
    """
    if len(a) == 0 or len(b) == 0 or a.total_weight <= 0 or b.total_weight <= 0:
        raise ValueError("both densities must be non-empty")
    if quadrature_cell is None:
        quadrature_cell = min(a.sigmas.min(), b.sigmas.min()) / 4.0
    # sqrt(p_a p_b) is negligible wherever either density is beyond ~6 sigma of all its components
    lo_a, hi_a = _support_box(a, 6.0)
    lo_b, hi_b = _support_box(b, 6.0)
    lo, hi = np.maximum(lo_a, lo_b), np.minimum(hi_a, hi_b)
    if np.any(hi <= lo):
        return 0.0
    n = np.ceil((hi - lo) / quadrature_cell).astype(int)
    axes = [lo[i] + (np.arange(n[i]) + 0.5) * quadrature_cell for i in range(3)]
    total = 0.0
    step = max(1, max_slab // (n[1] * n[2]))
    for start in range(0, n[0], step):
        sub = [axes[0][start : start + step], axes[1], axes[2]]
        pa = _mixture_on_lattice(a, sub)
        pb = _mixture_on_lattice(b, sub)
        total += float(np.sqrt(pa * pb).sum())
    return total * quadrature_cell**3


def _mixture_on_lattice(density: SurfaceDensity, axes) -> np.ndarray:
    gx, gy, gz = _separable_factors(density, axes)
    xy = gx[:, :, None] * gy[:, None, :]
    return np.tensordot(xy, gz, axes=(0, 0))


def _check_same_lattice(a: GridSpec, b: GridSpec):
    if not np.allclose(a.cell_size, b.cell_size, rtol=1e-12, atol=0.0):
        raise ValueError(f"cell sizes differ: {a.cell_size} vs {b.cell_size}")


def bhattacharyya_grid(a: DensityGrid, b: DensityGrid) -> float:
    _check_same_lattice(a.spec, b.spec)
    if a.spec.dims != b.spec.dims:
        raise ValueError(f"grid dims differ: {a.spec.dims} vs {b.spec.dims}")
    return float(np.sqrt(a.mass * b.mass).sum())


def _embed(obs: DensityGrid, model: GridSpec, wx: int, wy: int) -> np.ndarray:
    """Obs mass re-indexed onto the model lattice, padded by (wx, wy) cells in x and y."""
    _check_same_lattice(obs.spec, model)
    cell = np.asarray(model.cell_size)
    shift = (np.asarray(obs.spec.origin) - np.asarray(model.origin)) / cell
    ishift = np.rint(shift).astype(int)
    if np.any(np.abs(shift - ishift) > 1e-6):
        raise ValueError("observation grid is not aligned with the model lattice")
    nx, ny, nz = model.dims
    out = np.zeros((nx + 2 * wx, ny + 2 * wy, nz))
    lo_out = ishift + np.array([wx, wy, 0])
    src, dst = [], []
    for a, n_out in enumerate(out.shape):
        s0 = max(0, -lo_out[a])
        d0 = max(0, lo_out[a])
        length = min(obs.spec.dims[a] - s0, n_out - d0)
        if length <= 0:
            return out
        src.append(slice(s0, s0 + length))
        dst.append(slice(d0, d0 + length))
    out[tuple(dst)] = obs.mass[tuple(src)]
    return out


def _window_cells(window: SearchWindow, spec: GridSpec) -> tuple[int, int]:
    wx = int(math.ceil(window.tx_range / spec.cell_size[0] - 1e-9))
    wy = int(math.ceil(window.ty_range / spec.cell_size[1] - 1e-9))
    if wx >= spec.dims[0] or wy >= spec.dims[1]:
        raise ValueError(f"search window ({wx}, {wy}) cells exceeds grid dims {spec.dims[:2]}")
    return wx, wy


class _ModelSpectrum:
    """Cached 2D spectrum of sqrt(model) for repeated correlations on one padded shape."""

    def __init__(self, model: DensityGrid, wx: int, wy: int):
        self.spec = model.spec
        self.wx, self.wy = wx, wy
        self.shape = (model.spec.dims[0] + 2 * wx, model.spec.dims[1] + 2 * wy)
        self.fm = np.conj(np.fft.rfft2(np.sqrt(model.mass), s=self.shape, axes=(0, 1)))

    def surface(self, obs: DensityGrid) -> np.ndarray:
        o = np.sqrt(_embed(obs, self.spec, self.wx, self.wy))
        fo = np.fft.rfft2(o, s=self.shape, axes=(0, 1))
        corr = np.fft.irfft2((self.fm * fo).sum(axis=2), s=self.shape)
        out = corr[: 2 * self.wx + 1, : 2 * self.wy + 1]
        return np.clip(out, 0.0, None)


def translation_score_surface(model: DensityGrid, obs: DensityGrid, window: SearchWindow) -> np.ndarray:
    """Similarity for every integer (dx, dy) displacement of obs relative to model.

    ``surface[i, j]`` holds the score for displacement ``(i - wx, j - wy)`` cells:
    the sum over model cells x of sqrt(model(x) * obs(x + d)).  Each z slice is
    correlated in 2D and the slices are summed.  The correlation runs through
    FFTs at the padded size, which is exact for these offsets (no wrap-around).
    """
    wx, wy = _window_cells(window, model.spec)
    return _ModelSpectrum(model, wx, wy).surface(obs)


def score_surface_direct(model: DensityGrid, obs: DensityGrid, wx: int, wy: int) -> np.ndarray:
    """Plain spatial correlation, the reference for :func:`translation_score_surface`."""
    o = np.sqrt(_embed(obs, model.spec, wx, wy))
    m = np.sqrt(model.mass)
    nx, ny, _ = model.spec.dims
    out = np.empty((2 * wx + 1, 2 * wy + 1))
    for i in range(2 * wx + 1):
        for j in range(2 * wy + 1):
            out[i, j] = float((m * o[i : i + nx, j : j + ny]).sum())
    return out


def _parabola(s_minus: float, s0: float, s_plus: float):
    """Vertex offset (clamped to half a sample) and value gain of the 3-point parabola."""
    curv = s_minus - 2.0 * s0 + s_plus
    if curv >= 0.0:
        return 0.0, 0.0
    u = float(np.clip(0.5 * (s_minus - s_plus) / curv, -0.5, 0.5))
    a = 0.5 * curv
    b = 0.5 * (s_plus - s_minus)
    return u, b * u + a * u * u


def refine_parabolic(surface: np.ndarray, peak, cell_size) -> PeakRefinement:
    """Sub-cell peak location from independent 1D parabolas along each axis.

    Returns the fractional offset in meters (relative to ``peak``) and the
    parabola vertex score.  A peak on the boundary is returned unrefined.
    """
    surface = np.asarray(surface, dtype=float)
    peak = tuple(int(p) for p in peak)
    cell = np.broadcast_to(np.asarray(cell_size, dtype=float), (surface.ndim,))
    s0 = surface[peak]
    if any(p <= 0 or p >= n - 1 for p, n in zip(peak, surface.shape)):
        return PeakRefinement(np.zeros(surface.ndim), float(np.clip(s0, 0.0, 1.0)), False)
    offset = np.zeros(surface.ndim)
    gain = 0.0
    for axis in range(surface.ndim):
        lo, hi = list(peak), list(peak)
        lo[axis] -= 1
        hi[axis] += 1
        u, g = _parabola(surface[tuple(lo)], s0, surface[tuple(hi)])
        offset[axis] = u * cell[axis]
        gain += g
    return PeakRefinement(offset, float(np.clip(s0 + gain, 0.0, 1.0)), True)


# --- grid construction -------------------------------------------------------------


def model_grid_spec(density: SurfaceDensity, config: RegistrationConfig = RegistrationConfig(), extra_margin: float = 0.0) -> GridSpec:
    """Grid around the model: cell tied to the median bandwidth, bounding box plus margin."""
    if len(density) == 0:
        raise EmptyGridError("cannot size a grid for an empty density")
    sig_med = float(np.median(density.sigmas))
    margin = config.margin_sigmas * sig_med + extra_margin
    lo = density.centers.min(axis=0) - margin
    hi = density.centers.max(axis=0) + margin
    ext = hi - lo
    cell_xy = max(sig_med, float(ext[:2].max()) / config.max_cells_xy)
    nx, ny = (int(math.ceil(e / cell_xy)) for e in ext[:2])
    dz = max(cell_xy, float(ext[2]) / config.slices)
    nz = max(1, min(config.slices, int(math.ceil(ext[2] / dz - 1e-9))))
    dims = np.array([nx, ny, nz])
    size = np.array([cell_xy, cell_xy, dz])
    center = 0.5 * (lo + hi)
    return GridSpec(tuple(center - 0.5 * dims * size), tuple(size), tuple(dims))


def smoothing_floor(spec: GridSpec, config: RegistrationConfig) -> float:
    """Minimum bandwidth used when binning, so cell-center sampling does not alias."""
    return config.smoothing * spec.cell_size[0]


def discretize_model(
    density: SurfaceDensity, config: RegistrationConfig = RegistrationConfig(), extra_margin: float = 0.0,
) -> DensityGrid:
    spec = model_grid_spec(density, config, extra_margin)
    return discretize(density.with_min_sigma(smoothing_floor(spec, config)), spec)


# --- end-to-end registration -----------------------------------------------------


def _pick_peak(volume: np.ndarray, center) -> tuple[int, int, int]:
    """Global maximum; ties go to the smallest displacement from ``center``, then lexicographic order."""
    best = volume.max()
    cand = np.argwhere(volume >= best - 1e-12)
    dist = ((cand - center) ** 2).sum(axis=1)
    order = np.lexsort(tuple(cand.T[::-1]) + (dist,))
    return tuple(int(v) for v in cand[order[0]])


def register(
    model: SurfaceDensity,
    obs: ObjectCluster | SurfaceDensity,
    predicted: RigidMotion2D = RigidMotion2D(),
    window: SearchWindow = SearchWindow(1.0, 1.0),
    config: RegistrationConfig = RegistrationConfig(),
    model_grid: DensityGrid | None = None,
) -> RegistrationResult:
    """Find the object motion (model -> observation) that maximizes the similarity.

    Without ``model_grid`` the model is binned here, on a grid padded as far as
    the search window needs.

    Observation hits are mapped back into the model frame with the predicted
    motion, discretized once per sampled yaw on the model lattice (padded by the
    search window), and correlated against the model grid.
    """
    if len(model) == 0:
        raise ValueError("model is empty")
    if model_grid is None:
        # a small model gets a grid wide enough for the search window
        spec = model_grid_spec(model, config)
        short = max(window.tx_range, window.ty_range) - 0.5 * min(spec.dims[0] - 1, spec.dims[1] - 1) * spec.cell_size[0]
        model_grid = discretize_model(model, config, max(0.0, short))
    spec = model_grid.spec
    floor = smoothing_floor(spec, config)
    obs_density = obs if isinstance(obs, SurfaceDensity) else build_density(obs, config.k_sigma, config.sigma_floor, weight=1.0)
    if len(obs_density) == 0:
        raise ValueError("observation is empty")
    obs_density = obs_density.with_min_sigma(floor)

    wx, wy = _window_cells(window, spec)
    obs_spec = spec.padded(wx, wy)
    spectrum = _ModelSpectrum(model_grid, wx, wy)
    c = model.centroid()[:2]
    yaw_offsets = window.yaw_offsets()
    layers = []
    any_mass = False
    for dyaw in yaw_offsets:
        trial = RigidMotion2D(predicted.tx, predicted.ty, predicted.yaw + dyaw)
        base = SurfaceDensity(trial.invert_points(obs_density.centers, c), obs_density.sigmas, obs_density.weights)
        mass = discretize_unnormalized(base, obs_spec)
        total = mass.sum()
        if total <= 0:
            layers.append(np.zeros((2 * wx + 1, 2 * wy + 1)))
            continue
        any_mass = True
        layers.append(spectrum.surface(DensityGrid(obs_spec, mass / total, raw_total=total)))
    if not any_mass:
        raise EmptyGridError("observation falls outside the model grid and search window")
    volume = np.stack(layers)

    k, i, j = _pick_peak(volume, (int(np.argmin(np.abs(yaw_offsets))), wx, wy))
    ref = refine_parabolic(volume[k], (i, j), spec.cell_size[:2])
    converged = ref.converged
    score = ref.score
    dyaw = float(yaw_offsets[k])
    if len(yaw_offsets) >= 3:
        if 0 < k < len(yaw_offsets) - 1:
            step = float(yaw_offsets[1] - yaw_offsets[0])
            u, gain = _parabola(volume[k - 1, i, j], volume[k, i, j], volume[k + 1, i, j])
            dyaw += u * step
            score = float(np.clip(score + gain, 0.0, 1.0))
        else:
            converged = False
    layer_yaw = predicted.yaw + float(yaw_offsets[k])
    disp = (np.array([i - wx, j - wy]) * np.asarray(spec.cell_size[:2]) + ref.offset)
    t = predicted.translation + rot2(layer_yaw) @ disp
    motion = RigidMotion2D(t[0], t[1], predicted.yaw + dyaw)
    offsets = (
        (np.arange(2 * wx + 1) - wx) * spec.cell_size[0],
        (np.arange(2 * wy + 1) - wy) * spec.cell_size[1],
        yaw_offsets,
    )
    return RegistrationResult(motion, score, volume, converged, offsets, (int(k), int(i), int(j)), layer_yaw)


def peak_curvature(result: RegistrationResult) -> np.ndarray | None:
    """Negative Hessian of the score over world translation at the peak (score / m^2).

    Central differences on the peak's yaw layer.  None when the peak touches
    the window boundary.
    """
    if result.peak is None:
        return None
    k, i, j = result.peak
    s = result.score_surface[k]
    if not (0 < i < s.shape[0] - 1 and 0 < j < s.shape[1] - 1):
        return None
    hx = float(result.offsets[0][1] - result.offsets[0][0])
    hy = float(result.offsets[1][1] - result.offsets[1][0])
    dxx = (s[i + 1, j] - 2 * s[i, j] + s[i - 1, j]) / hx**2
    dyy = (s[i, j + 1] - 2 * s[i, j] + s[i, j - 1]) / hy**2
    dxy = (s[i + 1, j + 1] - s[i + 1, j - 1] - s[i - 1, j + 1] + s[i - 1, j - 1]) / (4 * hx * hy)
    h = -np.array([[dxx, dxy], [dxy, dyy]])
    r = rot2(result.layer_yaw)
    return r @ h @ r.T


def dump_surface(result: RegistrationResult, fh: TextIO) -> None:
    """Write the score volume as text rows: dx, dy, dyaw, score."""
    xs, ys, yaws = result.offsets
    for k, dyaw in enumerate(yaws):
        for i, dx in enumerate(xs):
            for j, dy in enumerate(ys):
                fh.write(f"{dx:.4f}\t{dy:.4f}\t{dyaw:.5f}\t{result.score_surface[k, i, j]:.6f}\n")
