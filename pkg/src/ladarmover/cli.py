"""Command-line driver: simulate, detect, evaluate, bench.

Exit codes: 0 success, 2 usage, 3 unparsable input file, 4 invalid
configuration or inconsistent inputs, 5 file I/O failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import sys

import yaml
from pydantic import ValidationError

from . import __version__
from .harness import ConfigError, evaluate, load_config, run_pipeline
from .scan_geometry import FrameFormatError
from .simulator import TruthFormatError, generate_sequence, load_scene, read_truth
from .tracker import read_records

EXIT_RUNTIME = 1
EXIT_PARSE = 3
EXIT_VALIDATION = 4
EXIT_IO = 5


class RecordFormatError(ValueError):
    pass


def _config(args, **paths):
    overrides = list(args.set or [])
    if args.threads is not None:
        overrides.append(f"budget.threads={args.threads}")
    cfg = load_config(args.config, overrides)
    return cfg.model_copy(update={k: str(v) for k, v in paths.items() if v is not None})


def cmd_simulate(args) -> int:
    scene = load_scene(args.scene)
    frames, truth = generate_sequence(scene, args.seed, args.output)
    print(f"frames\t{frames}")
    print(f"truth\t{truth}")
    print(f"frame_count\t{scene.n_frames}")
    return 0


def cmd_detect(args) -> int:
    cfg = _config(args, input=args.frames, output=args.output, truth=args.truth)
    records, report, timing = run_pipeline(cfg)
    movers = len({r.track_id for r in records if r.is_mover})
    print(f"frames\t{timing.frames}")
    print(f"records\t{len(records)}")
    print(f"mover_tracks\t{movers}")
    if report is not None:
        report.throughput = timing.fps
        sys.stdout.write("\n".join(report.lines(include_throughput=True)) + "\n")
    return 0


def cmd_evaluate(args) -> int:
    with open(args.detections) as fh:
        try:
            records = read_records(fh)
        except ValueError as exc:
            raise RecordFormatError(f"{args.detections}: {exc}") from None
    truth = read_truth(args.truth)
    report = evaluate(records, truth, args.match_radius)
    sys.stdout.write("\n".join(report.lines()) + "\n")
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args, input=args.frames)
    best = None
    for _ in range(args.repeat):
        _, _, timing = run_pipeline(cfg)
        if best is None or timing.seconds < best.seconds:
            best = timing
    print(f"frames\t{best.frames}")
    print(f"seconds\t{best.seconds:.6f}")
    print(f"throughput_fps\t{best.fps:.3f}")
    print(f"threads\t{cfg.budget.threads}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ladarmover", description="Moving-object detection from scanning Ladar frames.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="render a scene file to frames.ldr and truth.txt")
    s.add_argument("scene", help="YAML scene description")
    s.add_argument("-o", "--output", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0, help="range-noise seed")
    s.set_defaults(func=cmd_simulate)

    def pipeline_flags(q):
        q.add_argument("-c", "--config", help="YAML pipeline config (defaults when omitted)")
        q.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config value, e.g. tracker.speed_min=1.0 (repeatable)")
        q.add_argument("--threads", type=int, help="per-frame registration workers")

    d = sub.add_parser("detect", help="run the pipeline over a frame file")
    d.add_argument("frames", help="LDR1 frame file")
    d.add_argument("-o", "--output", required=True, help="detection stream (text)")
    d.add_argument("--truth", help="ground-truth sidecar; prints the evaluation report")
    pipeline_flags(d)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("evaluate", help="score a detection stream against ground truth")
    e.add_argument("detections")
    e.add_argument("truth")
    e.add_argument("--match-radius", type=float, default=2.0, help="meters")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="measure pipeline throughput on a frame file")
    b.add_argument("frames")
    b.add_argument("--repeat", type=int, default=1, help="report the fastest of this many runs")
    pipeline_flags(b)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FrameFormatError, TruthFormatError, RecordFormatError, yaml.YAMLError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ConfigError, ValidationError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
