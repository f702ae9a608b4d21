"""Acceptance criteria, one test each; a pass/fail summary line per criterion is
printed at the end of the run.  Run alone with ``pytest tests/test_acceptance.py``.
"""

import time

import numpy as np
import pytest

from ladarmover.density import GridSpec, SurfaceDensity, build_density, discretize
from ladarmover.harness import build_config, run_pipeline
from ladarmover.registration import (
    RigidMotion2D,
    SearchWindow,
    bhattacharyya_continuous,
    bhattacharyya_grid,
    model_grid_spec,
    register,
    rot2,
)
from ladarmover.scan_geometry import write_frames
from ladarmover.scenes import clutter_scene, open_scene
from ladarmover.simulator import generate_sequence, read_truth, render_sequence
from ladarmover.tracker import KalmanState, TrackerParams, kalman_predict, kalman_update

from conftest import box_surface, make_cluster

P = TrackerParams()


def detail(record_property, text):
    record_property("detail", text)


def covering_spec(a, b, cell, truncate=4.0):
    lo = np.minimum((a.centers - truncate * a.sigmas[:, None]).min(0), (b.centers - truncate * b.sigmas[:, None]).min(0))
    hi = np.maximum((a.centers + truncate * a.sigmas[:, None]).max(0), (b.centers + truncate * b.sigmas[:, None]).max(0))
    lo, hi = lo - cell, hi + cell
    return GridSpec(tuple(lo), (cell,) * 3, tuple(int(n) for n in np.ceil((hi - lo) / cell)))


def simulate(scene, seed=0):
    seq = render_sequence(scene, seed)
    return [(f, p) for f, p, _ in seq], [g for _, _, g in seq]


@pytest.mark.acceptance("grid score matches continuous oracle")
def test_oracle_equivalence(record_property):
    rng = np.random.default_rng(2024)

    def mixture():
        n = int(rng.integers(1, 11))
        return SurfaceDensity(rng.uniform(-0.5, 0.5, (n, 3)), rng.uniform(0.05, 0.5, n), rng.uniform(0.2, 1.0, n))

    start = time.perf_counter()
    errors = []
    for _ in range(100):
        a, b = mixture(), mixture()
        cell = min(a.sigmas.min(), b.sigmas.min()) / 2
        spec = covering_spec(a, b, cell)
        grid = bhattacharyya_grid(discretize(a, spec), discretize(b, spec))
        errors.append(abs(grid - bhattacharyya_continuous(a, b)))
    elapsed = time.perf_counter() - start
    detail(record_property, f"max |grid - continuous| {max(errors):.4f} over 100 pairs, {elapsed:.1f} s")
    assert max(errors) <= 0.05
    assert elapsed < 60.0


@pytest.mark.acceptance("closed-form score of two Gaussians")
def test_closed_form(record_property):
    sigma = 0.2
    errs = []
    for d in (0.0, sigma, 2 * sigma, 4 * sigma):
        a = SurfaceDensity([[0.0, 0.0, 0.0]], sigma, 1.0)
        b = SurfaceDensity([[d, 0.0, 0.0]], sigma, 1.0)
        spec = covering_spec(a, b, sigma / 2)
        got = bhattacharyya_grid(discretize(a, spec), discretize(b, spec))
        errs.append(abs(got - np.exp(-d * d / (8 * sigma * sigma))))
    detail(record_property, "errors at d = 0, s, 2s, 4s: " + ", ".join(f"{e:.4f}" for e in errs))
    assert max(errs) <= 0.03


@pytest.mark.acceptance("registration recovers rigid motion")
def test_registration_recovery(record_property):
    rng = np.random.default_rng(7)
    window = SearchWindow(1.2, 1.2, 5, np.deg2rad(15.0))
    ok = 0
    for _ in range(200):
        pts = box_surface(rng, 40, center=(15.0, 5.0))
        t = rng.uniform(-1.0, 1.0, 2)
        t *= min(1.0, 1.0 / np.hypot(*t))
        yaw = np.deg2rad(rng.uniform(-10.0, 10.0))
        c = pts[:, :2].mean(axis=0)
        obs = pts.copy()
        obs[:, :2] = (obs[:, :2] - c) @ rot2(yaw).T + c + t
        # range noise along each line of sight
        los = obs / np.linalg.norm(obs, axis=1)[:, None]
        obs += los * rng.normal(0.0, 0.02, (len(obs), 1))
        res = register(build_density(make_cluster(pts)), make_cluster(obs), RigidMotion2D(), window)
        t_err = np.hypot(*(res.motion.translation - t))
        y_err = np.rad2deg(abs(res.motion.yaw - yaw))
        ok += t_err <= 0.1 and y_err <= 3.0
    detail(record_property, f"{ok}/200 trials within 0.1 m and 3 deg")
    assert ok >= 190


@pytest.mark.acceptance("self-registration is the identity")
def test_self_similarity(record_property):
    rng = np.random.default_rng(99)
    worst_score, worst_shift = 1.0, 0.0
    for _ in range(50):
        n = int(rng.integers(40, 400))
        center = rng.uniform(5.0, 40.0, 2) * [1.0, rng.choice([-1.0, 1.0])]
        if rng.random() < 0.5:
            pts = box_surface(rng, n, size=tuple(rng.uniform([0.5, 0.5, 0.5], [5.0, 2.5, 3.0])), center=center)
        else:
            r, th = rng.uniform(0.15, 0.6), rng.uniform(0, 2 * np.pi, n)
            pts = np.column_stack((center[0] + r * np.cos(th), center[1] + r * np.sin(th), rng.uniform(0, 4.0, n)))
        model = build_density(make_cluster(pts))
        res = register(model, make_cluster(pts))
        cell = model_grid_spec(model).cell_size[0]
        worst_score = min(worst_score, res.score)
        worst_shift = max(worst_shift, np.hypot(res.motion.tx, res.motion.ty) / cell)
    detail(record_property, f"lowest score {worst_score:.4f}, largest shift {worst_shift:.3f} cell")
    assert worst_score >= 0.95 and worst_shift <= 0.1


@pytest.mark.slow
@pytest.mark.acceptance("mover detection, open scene")
def test_open_scene(record_property):
    frames, truth = simulate(open_scene(200))
    _, report, _ = run_pipeline(build_config(), frames, truth)
    latency = report.latency[1]
    detail(record_property, f"latency {latency} frames (limit {P.confirm_frames + 5}), "
           f"stationary flags {report.false_alarms}, hit {report.hit_percentage[1]:.1f}%")
    assert latency is not None and latency <= P.confirm_frames + 5
    assert report.false_alarms == 0


@pytest.mark.slow
@pytest.mark.acceptance("clutter scene hit rate and false alarms")
def test_clutter_scene(record_property):
    layouts = range(14)
    hits = visible = false_alarms = frames = 0
    worst = None
    for layout in layouts:
        scene_frames, truth = simulate(clutter_scene(layout))
        _, rep, _ = run_pipeline(build_config(), scene_frames, truth)
        hits += rep.hit_percentage[1] * rep.visible_frames[1] / 100.0
        visible += rep.visible_frames[1]
        false_alarms += rep.false_alarms
        frames += rep.frames
        if worst is None or rep.false_alarms_per_frame > worst[1]:
            worst = (layout, rep.false_alarms_per_frame, rep.hit_percentage[1])
    hit_pct = 100.0 * hits / visible
    fa_rate = false_alarms / frames
    detail(record_property, f"{len(layouts)} layouts: hit {hit_pct:.1f}%, {fa_rate:.4f} false alarms/frame; "
           f"worst layout {worst[0]}: {worst[1]:.2f}/frame at {worst[2]:.1f}% hit")
    assert hit_pct >= 80.0
    assert fa_rate <= 0.02


@pytest.mark.acceptance("Kalman filter correctness")
def test_kalman(record_property):
    rng = np.random.default_rng(0)
    ks = KalmanState.initial([0.0, 0.0], 0.0, 1.0, 3.0)
    t, min_eig, max_asym = 0.0, np.inf, 0.0
    for _ in range(1000):
        t += rng.uniform(0.0, 0.5)
        ks = kalman_predict(ks, t, rng.uniform(0.1, 5.0))
        ks = kalman_update(ks, rng.normal(0, 10, 2), rng.uniform(0.01, 1.0))
        min_eig = min(min_eig, np.linalg.eigvalsh(ks.covariance).min())
        max_asym = max(max_asym, np.abs(ks.covariance - ks.covariance.T).max())

    start = KalmanState(np.array([1.0, -1.0, 2.0, 0.5]), np.diag([0.3, 0.2, 1.0, 2.0]), 0.0)
    two = kalman_predict(kalman_predict(start, 0.07, 3.0), 0.2, 3.0)
    one = kalman_predict(start, 0.2, 3.0)
    split_err = max(np.abs(two.state - one.state).max(), np.abs(two.covariance - one.covariance).max())

    v = np.array([4.0, -3.0])
    cv = KalmanState.initial([0.0, 0.0], 0.0, 0.2, 10.0)
    for k in range(1, 21):
        cv = kalman_update(kalman_predict(cv, 0.1 * k, 3.0), v * 0.1 * k, 0.2)
    speed_err = abs(cv.speed - 5.0) / 5.0
    detail(record_property, f"min eigenvalue {min_eig:.2e}, split-predict error {split_err:.1e}, "
           f"speed error {100 * speed_err:.2f}% after 20 updates")
    assert min_eig >= -1e-9 and max_asym <= 1e-9
    assert split_err <= 1e-9
    assert speed_err <= 0.05


@pytest.mark.acceptance("end-to-end determinism")
def test_determinism(record_property, tmp_path):
    scene = clutter_scene(0, frames=40)
    outputs = []
    for k in range(2):
        frames_path, truth_path = generate_sequence(scene, 3, tmp_path / f"seq{k}")
        cfg = build_config({"input": str(frames_path), "output": str(tmp_path / f"det{k}.txt")})
        _, report, _ = run_pipeline(cfg, truth=read_truth(truth_path))
        outputs.append((frames_path.read_bytes(), (tmp_path / f"det{k}.txt").read_bytes(), "\n".join(report.lines())))
    same = [a == b for a, b in zip(*outputs)]
    detail(record_property, "frames, detections, report identical: " + ", ".join(map(str, same)))
    assert all(same)


@pytest.mark.slow
@pytest.mark.acceptance("real-time throughput")
def test_throughput(record_property, tmp_path):
    scene = clutter_scene(0, frames=100)
    frames, _ = simulate(scene)
    path = tmp_path / "frames.ldr"
    write_frames(path, frames)
    rows, cols = frames[0][0].ranges.shape
    cfg = build_config({"input": str(path), "budget": {"threads": 1}})
    _, _, timing = run_pipeline(cfg)
    detail(record_property, f"{timing.frames} frames of {cols}x{rows} beams, {len(scene.objects)} objects: "
           f"{timing.fps:.1f} frames/s")
    assert timing.frames == 100 and (rows, cols) == (64, 180) and len(scene.objects) >= 20
    assert timing.fps >= 10.0
