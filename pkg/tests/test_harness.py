import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ladarmover.harness import ConfigError, PipelineConfig, build_config, evaluate, load_config, run_pipeline
from ladarmover.scan_geometry import FrameFormatError, write_frames
from ladarmover.scenes import two_mover_scene
from ladarmover.simulator import GroundTruthFrame, ObjectTruth, Scene, render_sequence
from ladarmover.tracker import TrackRecord, write_records


def run(scene, seed=0, config=None):
    seq = render_sequence(scene, seed)
    truth = [g for _, _, g in seq]
    recs, report, timing = run_pipeline(config or build_config(), [(f, p) for f, p, _ in seq], truth)
    return recs, report, truth


def driving(objects, duration=5.0):
    return Scene.model_validate(dict(
        duration=duration, sensor=dict(trajectory=dict(segments=[dict(duration=duration, speed=3.0)])),
        objects=objects,
    ))


# --- end to end ---------------------------------------------------------------------------


def test_empty_scene_no_tracks():
    recs, report, _ = run(driving([], duration=3.0))
    assert recs == []
    assert report.false_alarms == 0 and report.hit_percentage == {}


def test_stationary_box_never_mover():
    recs, report, _ = run(driving([dict(id=1, shape="box", size=[4.5, 1.8, 1.6], position=[25.0, 4.0])]))
    assert len({r.track_id for r in recs}) == 1
    assert len(recs) >= 45
    assert not any(r.is_mover for r in recs)
    assert report.false_alarms == 0


@pytest.fixture(scope="module")
def two_movers():
    return run(two_mover_scene(frames=60))


def test_two_movers_detected(two_movers):
    recs, report, truth = two_movers
    assert sorted(report.hit_percentage) == [1, 2]
    for oid in (1, 2):
        assert report.latency[oid] is not None and report.latency[oid] <= 8
        assert report.hit_percentage[oid] >= 80.0
    assert report.false_alarms == 0
    assert len({r.track_id for r in recs if r.is_mover}) == 2


def test_report_lines_are_tab_separated(two_movers):
    _, report, _ = two_movers
    report.throughput = 12.5
    lines = report.lines(include_throughput=True)
    keys = [ln.split("\t")[0] for ln in lines]
    assert all(len(ln.split("\t")) == 2 for ln in lines)
    assert keys[:6] == ["frames", "targets", "false_alarms", "false_alarms_per_frame",
                        "hit_percentage_mean", "latency_frames_mean"]
    assert "throughput_fps" in keys and len(keys) == len(set(keys))
    assert 0.0 <= report.hit_percentage[1] <= 100.0


def test_deterministic_byte_identical(tmp_path):
    seq = render_sequence(two_mover_scene(frames=30), 0)
    frames = tmp_path / "frames.ldr"
    write_frames(frames, [(f, p) for f, p, _ in seq])
    truth = [g for _, _, g in seq]
    outs = []
    for k, threads in enumerate((1, 1, 2)):
        cfg = build_config({"input": str(frames), "output": str(tmp_path / f"out{k}.txt"), "budget": {"threads": threads}})
        _, report, _ = run_pipeline(cfg, truth=truth)
        buf = io.StringIO()
        report.write(buf)
        outs.append(((tmp_path / f"out{k}.txt").read_bytes(), buf.getvalue()))
    assert outs[0] == outs[1] == outs[2]
    assert outs[0][0]


def test_malformed_frame_file(tmp_path):
    path = tmp_path / "bad.ldr"
    path.write_bytes(b"LDR1" + b"\x00" * 10)
    with pytest.raises(FrameFormatError) as err:
        run_pipeline(build_config({"input": str(path)}))
    assert err.value.offset == 4


# --- evaluation ---------------------------------------------------------------------------


def truth_seq(n=20, movers=((1, 0.0, 0.0, 1.0), (2, 10.0, 5.0, -1.0)), hidden=()):
    out = []
    for k in range(n):
        objs = tuple(
            ObjectTruth(oid, x0 + v * 0.1 * k, y0, 0.0, v, 0.0, 0 if (oid, k) in hidden else 50, True)
            for oid, x0, y0, v in movers
        ) + (ObjectTruth(9, 30.0, 0.0, 0.0, 0.0, 0.0, 40, False),)
        out.append(GroundTruthFrame(k, 0.1 * k, np.zeros((2, 2), dtype=np.int32), objs))
    return out


def perfect(truth, dx=0.0):
    return [
        TrackRecord(g.frame_id, o.id, o.x + dx, o.y, o.vx, o.vy, abs(o.vx), o.is_mover, 1.0, o.hits)
        for g in truth for o in g.objects
    ]


def test_evaluate_identity():
    truth = truth_seq()
    rep = evaluate(perfect(truth), truth)
    assert rep.hit_percentage == {1: 100.0, 2: 100.0}
    assert rep.false_alarms == 0 and rep.latency == {1: 0, 2: 0}
    assert rep.assignment[5] == {1: 1, 2: 2}


def test_evaluate_no_detections():
    truth = truth_seq()
    rep = evaluate([], truth)
    assert rep.hit_percentage == {1: 0.0, 2: 0.0}
    assert rep.false_alarms == 0 and rep.latency == {1: None, 2: None}


def test_evaluate_perturbed_beyond_radius():
    truth = truth_seq()
    rep = evaluate(perfect(truth, dx=3.0), truth, match_radius=2.0)
    assert rep.hit_percentage == {1: 0.0, 2: 0.0}
    assert rep.false_alarms == 2 * len(truth)


def test_occluded_frames_not_counted():
    hidden = {(1, k) for k in range(5, 10)}
    truth = truth_seq(hidden=hidden)
    recs = [r for r in perfect(truth) if not (r.track_id == 1 and 5 <= r.frame_id < 12)]
    rep = evaluate(recs, truth)
    assert rep.visible_frames[1] == 15
    # the two frames after reappearance without a flag count as misses
    assert rep.hit_percentage[1] == pytest.approx(100.0 * 13 / 15)


def test_latency_counts_from_first_visible():
    hidden = {(1, k) for k in range(3)}
    truth = truth_seq(hidden=hidden)
    recs = [r for r in perfect(truth) if not (r.track_id == 1 and r.frame_id < 7)]
    assert evaluate(recs, truth).latency[1] == 4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 3.0), st.floats(0.1, 3.0))
def test_hit_rate_monotone_in_radius(seed, r1, r2):
    rng = np.random.default_rng(seed)
    truth = truth_seq()
    recs = [r._replace(x=r.x + rng.normal(0, 1.5), y=r.y + rng.normal(0, 1.5)) for r in perfect(truth)]
    lo, hi = sorted((r1, r2))
    a, b = evaluate(recs, truth, lo), evaluate(recs, truth, hi)
    for oid in a.hit_percentage:
        assert a.hit_percentage[oid] <= b.hit_percentage[oid]
    assert a.false_alarms >= b.false_alarms


def test_evaluate_rejects_mismatched_frames():
    truth = truth_seq()
    with pytest.raises(ValueError):
        evaluate(perfect(truth) + [TrackRecord(99, 1, 0, 0, 0, 0, 0, True, 1, 1)], truth)
    with pytest.raises(ValueError):
        evaluate([], truth[1:])
    with pytest.raises(ValueError):
        evaluate([], truth, match_radius=0.0)


# --- configuration ------------------------------------------------------------------------


def test_default_config_file_matches_defaults():
    from pathlib import Path

    path = Path(__file__).resolve().parents[1] / "configs" / "default.yaml"
    assert load_config(path) == PipelineConfig()


def test_overrides_parse_yaml_values():
    cfg = build_config({}, ["tracker.speed_min=1.25", "budget.low_budget=true", "cluster.continuation=false"])
    assert cfg.tracker.speed_min == 1.25
    assert cfg.budget.low_budget is True and cfg.cluster.continuation is False


@pytest.mark.parametrize("data,overrides,key", [
    ({"tracker": {"bogus": 1}}, [], "tracker.bogus"),
    ({"nonsense": 1}, [], "nonsense"),
    ({}, ["tracker.meas_sigma=-1"], "tracker.meas_sigma"),
    ({}, ["cluster.dt_coefficient=0"], "cluster.dt_coefficient"),
    ({}, ["budget.threads=0"], "budget.threads"),
    ({}, ["tracker.speed_min=fast"], "tracker.speed_min"),
])
def test_config_errors_name_the_key(data, overrides, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        build_config(data, overrides)


def test_malformed_override():
    with pytest.raises(ConfigError):
        build_config({}, ["tracker.speed_min"])
    with pytest.raises(ConfigError):
        build_config({}, ["tracker.speed_min.x=1"])


def test_config_file_must_be_mapping(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_input_rejected():
    with pytest.raises(ConfigError):
        run_pipeline(build_config())


def test_records_written(tmp_path, two_movers):
    recs, _, _ = two_movers
    buf = io.StringIO()
    write_records(recs, buf)
    assert buf.getvalue().count("\n") == len(recs) + buf.getvalue().count("#")
