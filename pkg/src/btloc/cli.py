"""Command-line entry point.

Subcommands:

    btloc run --scenario s.json [--seed N] [--map map.json] [--tree tree.json]
              [--out DIR] [--trace] [--record] [--control FILE]
    btloc replay RUN_DIR/measurements.jsonl [--out DIR]
    btloc map build --scenario s.json --out map.json RUN_DIR [RUN_DIR ...]
    btloc report RUN_DIR [--out report.json]

Exit codes: 0 clean run, 1 bad input, 2 main filter finished LOST.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import runner
from .estimation import Sensor
from .mapdb import FeatureLayer, MapDb, build_location_model
from .simulator import Scenario, generate_features

_log = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="btloc",
        description="Behavior-tree supervised multi-sensor localisation runs")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="enable debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate a scenario under the supervisor")
    p_run.add_argument("--scenario", required=True, help="scenario JSON file")
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
    p_run.add_argument("--map", dest="map_path", default=None,
                       help="map database JSON (features + location model)")
    p_run.add_argument("--tree", dest="tree_path", default=None,
                       help="declarative tree definition JSON")
    p_run.add_argument("--out", default="run-out", help="output directory")
    p_run.add_argument("--trace", action="store_true",
                       help="write a per-node tick trace")
    p_run.add_argument("--record", action="store_true",
                       help="record the measurement stream for replay")
    p_run.add_argument("--control", default=None,
                       help="manual-reset command file polled each tick")

    p_replay = sub.add_parser("replay", help="re-run a recorded measurement log")
    p_replay.add_argument("measurements", help="path to measurements.jsonl")
    p_replay.add_argument("--out", default="replay-out", help="output directory")
    p_replay.add_argument("--trace", action="store_true")

    p_map = sub.add_parser("map", help="map database commands")
    map_sub = p_map.add_subparsers(dest="map_command", required=True)
    p_build = map_sub.add_parser("build",
                                 help="build location model layers from run logs")
    p_build.add_argument("run_dirs", nargs="+", help="run directories with stats.jsonl")
    p_build.add_argument("--scenario", required=True,
                         help="scenario JSON providing the feature layer")
    p_build.add_argument("--out", required=True, help="output map JSON")

    p_report = sub.add_parser("report", help="recompute a run report from its logs")
    p_report.add_argument("run_dir", help="run directory")
    p_report.add_argument("--out", default=None, help="write report here (default stdout)")
    return parser


def cmd_run(args) -> int:
    try:
        cfg = runner.RunConfig(
            scenario_path=args.scenario, map_path=args.map_path,
            tree_path=args.tree_path, seed=args.seed, out_dir=args.out,
            trace=args.trace, record=args.record, control_path=args.control)
        result = runner.run(cfg)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"btloc run: {exc}", file=sys.stderr)
        return 1
    print(f"run complete: {result.out_dir} (exit {result.exit_code})")
    return result.exit_code


def cmd_replay(args) -> int:
    try:
        cfg = runner.RunConfig(replay_path=args.measurements, out_dir=args.out,
                               trace=args.trace)
        result = runner.run(cfg)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"btloc replay: {exc}", file=sys.stderr)
        return 1
    print(f"replay complete: {result.out_dir} (exit {result.exit_code})")
    return result.exit_code


def cmd_map_build(args) -> int:
    try:
        scenario = Scenario.load(args.scenario)
        logs = []
        for run_dir in args.run_dirs:
            stats_path = Path(run_dir) / "stats.jsonl"
            rows = [runner.stats_from_dict(r)
                    for r in runner._read_jsonl(stats_path)]
            # GPS usability from the dedicated backup GPS filter; heading
            # history from accepted main-filter lidar updates
            rows = [r for r in rows
                    if (r.filter_id == "backup" and r.sensor is Sensor.GPS)
                    or (r.filter_id == "main" and r.sensor is Sensor.LIDAR)]
            if not rows:
                raise ValueError(f"no usable update statistics in {run_dir}")
            logs.append(rows)
        if not logs:
            raise ValueError("no run logs given")
        model = build_location_model(logs)
        mapdb = MapDb(FeatureLayer(generate_features(scenario)), model)
        mapdb.save(args.out)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"btloc map build: {exc}", file=sys.stderr)
        return 1
    print(f"map written: {args.out} ({len(model.cells)} cells)")
    return 0


def cmd_report(args) -> int:
    try:
        report = runner.recompute_report(args.run_dir)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"btloc report: {exc}", file=sys.stderr)
        return 1
    text = json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"report written: {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        return cmd_run(args)
    if args.command == "replay":
        return cmd_replay(args)
    if args.command == "map":
        return cmd_map_build(args)
    if args.command == "report":
        return cmd_report(args)
    return 1


if __name__ == "__main__":
    sys.exit(main())
