"""Run orchestration: build the pipeline and tree, drive the tick loop, log.

One run produces a self-describing directory:

    config.json            resolved scenario + tuning (reproduces the run)
    truth.jsonl            ground-truth poses at 100 Hz
    measurements.jsonl     recorded sensor stream (with --record)
    events.jsonl           sensor switches and loss recoveries
    stats.jsonl            every update statistic
    trajectory_main.jsonl  per-tick pose + mode rows (and _backup)
    trajectory_*.geojson   mode-colored exports
    report.json            deterministic run report
    timing.json / timing_hist.csv   wall-clock timing (non-deterministic)
    trace.jsonl            per-node tick trace (with --trace)
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import behaviors, estimation as est, metrics, simulator
from .behaviors import BehaviorConfig, SubtreeSlot, TransitionEvent, TransitionKind
from .bt import BehaviorTree, Blackboard
from .bt.io import TraceWriter, tree_from_dict
from .estimation import (
    AlignmentConfig,
    FilterHealth,
    FilterMode,
    GateBound,
    Sensor,
    UpdateOutcome,
    UpdateStats,
)
from .mapdb import FeatureLayer, MapDb
from .modules import (
    BlackboardPublisher,
    FilterKernelModule,
    FilterTuning,
    GpsObservationModel,
    LidarAlignModel,
    MeasurementSource,
    MotionSynchronizer,
    StatsRecorder,
    TrajectoryRecorder,
)
from .pipeline import Connection, PipelineGraph
from .simulator import Scenario, TruthTrajectory
from .types import Measurement, Pose2D, s_to_us

_log = logging.getLogger(__name__)

_SOURCE_OF_STREAM = {"encoder": "encoder-src", "gyro": "gyro-src",
                     "gps": "gps-src", "lidar": "lidar-src"}


class RouteManager:
    """Owns the switchable observation edges into the filter kernels.

    At most one observation route per filter: claiming a sensor disconnects
    the one previously connected before enabling the new one.
    """

    def __init__(self, graph: PipelineGraph, bb: Blackboard,
                 routes: dict[tuple[str, Sensor], Connection]):
        self._graph = graph
        self._bb = bb
        self._routes = routes
        self._current: dict[str, Optional[Sensor]] = {}
        self._since: dict[tuple[str, Sensor], int] = {}

    def current(self, filter_id: str) -> Optional[Sensor]:
        return self._current.get(filter_id)

    def since(self, filter_id: str, sensor: Sensor) -> Optional[int]:
        return self._since.get((filter_id, sensor))

    def claim(self, filter_id: str, sensor: Sensor, t_us: int) -> None:
        if self._current.get(filter_id) == sensor:
            return
        old = self._current.get(filter_id)
        if old is not None:
            self.release(filter_id, old)
        self._graph.connect(self._routes[(filter_id, sensor)])
        self._current[filter_id] = sensor
        self._since[(filter_id, sensor)] = t_us
        self._bb.post(f"route/{filter_id}", sensor.value)

    def release(self, filter_id: str, sensor: Sensor) -> None:
        if self._current.get(filter_id) != sensor:
            return
        self._graph.disconnect(self._routes[(filter_id, sensor)])
        self._current[filter_id] = None
        self._since.pop((filter_id, sensor), None)
        self._bb.post(f"route/{filter_id}", None)


@dataclass(slots=True)
class RunConfig:
    scenario_path: Optional[str] = None
    map_path: Optional[str] = None
    tree_path: Optional[str] = None
    seed: Optional[int] = None
    out_dir: str = "run-out"
    trace: bool = False
    record: bool = False
    replay_path: Optional[str] = None
    control_path: Optional[str] = None
    tuning: FilterTuning = field(default_factory=FilterTuning)
    behavior: BehaviorConfig = field(default_factory=BehaviorConfig)

    def __post_init__(self):
        if self.replay_path and self.scenario_path:
            raise ValueError("replay and scenario are mutually exclusive")
        if not self.replay_path and not self.scenario_path:
            raise ValueError("either a scenario or a replay path is required")


class Runtime:
    """Everything the behavior leaves touch during a run."""

    def __init__(self, scenario: Scenario, mapdb: MapDb, tuning: FilterTuning,
                 behavior: BehaviorConfig, trace_writer=None):
        self.scenario = scenario
        self.mapdb = mapdb
        self.tuning = tuning
        self.behavior = behavior
        self.bb = Blackboard()
        self.events: list[TransitionEvent] = []
        self.gps_slots: dict[str, SubtreeSlot] = {}
        self.tree: Optional[BehaviorTree] = None
        self._trace_writer = trace_writer

        graph = PipelineGraph()
        for name in _SOURCE_OF_STREAM.values():
            graph.add_module(MeasurementSource(name))
        motion = graph.add_module(MotionSynchronizer())
        gps_model = graph.add_module(GpsObservationModel())
        self.kernels: dict[str, FilterKernelModule] = {
            "main": graph.add_module(FilterKernelModule("main", tuning)),
            "backup": graph.add_module(FilterKernelModule("backup", tuning)),
        }
        align_cfg = AlignmentConfig(sensor_range=scenario.sensor.range_m)
        lidar_model = graph.add_module(LidarAlignModel(
            mapdb, lambda: self.kernels["main"].state, align_cfg,
            history_max_diff_rad=math.radians(behavior.cross_heading_diff_deg),
            bb_post=self.bb.post))
        self.stats_recorder = graph.add_module(StatsRecorder())
        self.traj_recorder = graph.add_module(TrajectoryRecorder())
        self.publisher = graph.add_module(BlackboardPublisher(self.bb.post))

        for src in ("encoder-src", "gyro-src"):
            graph.connect(Connection(src, "out", motion.name, "in"))
        graph.connect(Connection("gps-src", "out", gps_model.name, "in"))
        graph.connect(Connection("lidar-src", "out", lidar_model.name, "in"))
        for kernel in self.kernels.values():
            graph.connect(Connection(motion.name, "motion", kernel.name, "motion"))
            graph.connect(Connection(kernel.name, "stats", self.stats_recorder.name, "stats"))
            graph.connect(Connection(kernel.name, "stats", self.publisher.name, "stats"))
            graph.connect(Connection(kernel.name, "state", self.traj_recorder.name, "state"))
            graph.connect(Connection(kernel.name, "state", self.publisher.name, "state"))
        self.graph = graph

        self.router = RouteManager(graph, self.bb, {
            ("main", Sensor.GPS): Connection(gps_model.name, "obs", "main-filter", "obs"),
            ("main", Sensor.LIDAR): Connection(lidar_model.name, "obs", "main-filter", "obs"),
            ("backup", Sensor.GPS): Connection(gps_model.name, "obs", "backup-filter", "obs"),
        })
        self.lidar_model = lidar_model

    # -- helpers used by behavior leaves ----------------------------------

    def best_position(self) -> Optional[tuple[float, float]]:
        main = self.kernels["main"].state
        if main.initialized and main.health is not FilterHealth.LOST:
            return (main.pose.x, main.pose.y)
        backup = self.kernels["backup"].state
        if backup.initialized:
            return (backup.pose.x, backup.pose.y)
        if main.initialized:
            return (main.pose.x, main.pose.y)
        return None

    def reset_main(self, target: Pose2D, target_cov: np.ndarray, t_us: int) -> None:
        kernel = self.kernels["main"]
        mode = kernel.state.mode.value
        jump = kernel.reset_to(target, target_cov, t_us)
        self.events.append(TransitionEvent(
            t_us=t_us, kind=TransitionKind.LOSS_RECOVERY,
            from_mode=mode, to_mode=mode, jump_distance=jump))

    def reset_main_from_backup(self, t_us: int) -> None:
        backup = self.kernels["backup"].state
        if not backup.initialized:
            _log.warning("reinit requested but backup filter is uninitialized")
            return
        self.reset_main(backup.pose, backup.cov.copy(), t_us)

    def attach_tree(self, root) -> None:
        self.tree = BehaviorTree(root, trace=self._trace_writer)
        behaviors.finalize_slots(self)

    def attribute_mode(self, filter_id: str, now_us: int) -> FilterMode:
        kernel = self.kernels[filter_id]
        if not kernel.state.initialized:
            return FilterMode.UNINITIALIZED
        window = self.behavior.attribution_window_s * 1e6
        accept = kernel.last_accept
        if Sensor.LIDAR in accept and now_us - accept[Sensor.LIDAR][0] <= window:
            return FilterMode.LIDAR_DR
        if Sensor.GPS in accept and now_us - accept[Sensor.GPS][0] <= window:
            return FilterMode.GPS_DR
        return FilterMode.DR_ONLY


# --- log (de)serialization ----------------------------------------------------


def stats_to_dict(s: UpdateStats) -> dict:
    return {
        "t_us": s.t_us, "filter": s.filter_id, "sensor": s.sensor.value,
        "outcome": s.outcome.value, "mahalanobis": s.mahalanobis,
        "innovation": list(s.innovation) if s.innovation is not None else None,
        "bound": s.bound.name if s.bound is not None else None,
        "shift": s.shift,
        "pose": list(s.pose) if s.pose is not None else None,
        "rms_residual": s.rms_residual, "reason": s.reason,
    }


def stats_from_dict(row: dict) -> UpdateStats:
    return UpdateStats(
        t_us=row["t_us"], filter_id=row["filter"], sensor=Sensor(row["sensor"]),
        outcome=UpdateOutcome(row["outcome"]), mahalanobis=row.get("mahalanobis"),
        innovation=tuple(row["innovation"]) if row.get("innovation") else None,
        bound=GateBound[row["bound"]] if row.get("bound") else None,
        shift=row.get("shift"),
        pose=tuple(row["pose"]) if row.get("pose") else None,
        rms_residual=row.get("rms_residual"), reason=row.get("reason"))


def event_from_dict(row: dict) -> TransitionEvent:
    return TransitionEvent(t_us=row["t_us"], kind=TransitionKind(row["kind"]),
                           from_mode=row["from_mode"], to_mode=row["to_mode"],
                           jump_distance=row["jump_m"])


def _write_jsonl(path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


class ControlChannel:
    """Line-oriented command file polled once per tick.

    Commands: ``reset <x> <y> <heading>`` or ``reinit``.
    """

    def __init__(self, path):
        self._path = Path(path)
        self._offset = 0

    def poll(self) -> list[tuple]:
        if not self._path.exists():
            return []
        commands = []
        with open(self._path, encoding="utf-8") as fh:
            fh.seek(self._offset)
            chunk = fh.read()
        complete = chunk.rfind("\n")
        if complete < 0:
            return []
        self._offset += complete + 1
        for line in chunk[:complete + 1].splitlines():
            parts = line.strip().split()
            if not parts:
                continue
            if parts[0] == "reinit":
                commands.append(("reinit",))
            elif parts[0] == "reset" and len(parts) == 4:
                try:
                    commands.append(("reset", float(parts[1]), float(parts[2]),
                                     float(parts[3])))
                except ValueError:
                    _log.warning("bad reset command %r", line)
            else:
                _log.warning("unknown control command %r", line)
        return commands


@dataclass(slots=True)
class RunResult:
    exit_code: int
    out_dir: Path
    report: metrics.RunReport
    runtime: Runtime
    traj_main: list[metrics.TrajectoryPoint]
    traj_backup: list[metrics.TrajectoryPoint]


def _resolve_inputs(cfg: RunConfig) -> tuple[Scenario, TruthTrajectory,
                                             list[Measurement], MapDb, Optional[dict]]:
    if cfg.replay_path:
        replay_file = Path(cfg.replay_path)
        run_dir = replay_file.parent
        with open(run_dir / "config.json", encoding="utf-8") as fh:
            recorded = json.load(fh)
        scenario = Scenario.from_dict(recorded["scenario"])
        truth = simulator.load_truth(run_dir / "truth.jsonl")
        measurements = simulator.load_measurements(replay_file)
        map_file = recorded.get("map_file")
        if map_file:
            mapdb = MapDb.load(run_dir / map_file)
        else:
            mapdb = MapDb(FeatureLayer(simulator.generate_features(scenario)))
        return scenario, truth, measurements, mapdb, recorded
    scenario = Scenario.load(cfg.scenario_path)
    if cfg.seed is not None:
        scenario.seed = cfg.seed
    truth = simulator.generate_ground_truth(scenario)
    features = simulator.generate_features(scenario)
    measurements = simulator.synthesize_measurements(scenario, truth, features)
    if cfg.map_path:
        mapdb = MapDb.load(cfg.map_path)
    else:
        mapdb = MapDb(FeatureLayer(features))
    return scenario, truth, measurements, mapdb, None


def run(cfg: RunConfig) -> RunResult:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenario, truth, measurements, mapdb, recorded = _resolve_inputs(cfg)

    trace_fh = None
    trace_writer = None
    if cfg.trace:
        trace_fh = open(out_dir / "trace.jsonl", "w", encoding="utf-8")
        trace_writer = TraceWriter(trace_fh)

    rt = Runtime(scenario, mapdb, cfg.tuning, cfg.behavior, trace_writer=trace_writer)
    if cfg.tree_path:
        root = tree_from_dict(json.loads(Path(cfg.tree_path).read_text(encoding="utf-8")),
                              behaviors.binding_registry(rt))
    else:
        root = behaviors.build_experiment_tree(rt)
    rt.attach_tree(root)

    start = Pose2D(*scenario.start)
    for kernel in rt.kernels.values():
        kernel.initialize(start, 0)

    control = ControlChannel(cfg.control_path) if cfg.control_path else None
    timing: dict[str, list[float]] = {"tick": [], "lidar_frame": [], "gps_update": []}
    traj_main: list[metrics.TrajectoryPoint] = []
    traj_backup: list[metrics.TrajectoryPoint] = []
    prev_mode: dict[str, FilterMode] = {fid: FilterMode.UNINITIALIZED
                                        for fid in rt.kernels}

    period_us = s_to_us(scenario.tick_period_s)
    end_us = int(truth.t_us[-1])
    mi = 0
    n_meas = len(measurements)
    tick_times = range(period_us, end_us + 1, period_us)
    window_us = cfg.behavior.attribution_window_s * 1e6

    for t_tick in tick_times:
        while mi < n_meas and measurements[mi].t_us <= t_tick:
            m = measurements[mi]
            mi += 1
            if m.stream == "gps":
                rt.bb.post("meas/gps", m)
            t0 = time.perf_counter()
            rt.graph.inject(_SOURCE_OF_STREAM[m.stream], "in", m)
            elapsed = time.perf_counter() - t0
            if m.stream == "lidar":
                timing["lidar_frame"].append(elapsed)
            elif m.stream == "gps":
                timing["gps_update"].append(elapsed)
        if control is not None:
            for cmd in control.poll():
                rt.bb.post("control/manual_reset", cmd)
        rt.bb.post("clock_us", t_tick)
        t0 = time.perf_counter()
        rt.tree.tick(rt.bb)
        timing["tick"].append(time.perf_counter() - t0)

        for fid, kernel in rt.kernels.items():
            mode = rt.attribute_mode(fid, t_tick)
            kernel.state.mode = mode
            prev = prev_mode[fid]
            if (fid == "main" and mode is not prev
                    and prev is not FilterMode.UNINITIALIZED
                    and mode is not FilterMode.UNINITIALIZED):
                jump = 0.0
                if mode in (FilterMode.LIDAR_DR, FilterMode.GPS_DR):
                    sensor = Sensor.LIDAR if mode is FilterMode.LIDAR_DR else Sensor.GPS
                    info = kernel.last_accept.get(sensor)
                    if info is not None and t_tick - info[0] <= window_us:
                        jump = info[1]
                rt.events.append(TransitionEvent(
                    t_us=t_tick, kind=TransitionKind.SENSOR_SWITCH,
                    from_mode=prev.value, to_mode=mode.value, jump_distance=jump))
            prev_mode[fid] = mode
            rejected_recent = any(
                t_tick - t <= window_us for t in kernel.last_reject_us.values())
            point = metrics.TrajectoryPoint(
                tick=rt.tree.tick_index - 1, t_us=t_tick, filter_id=fid,
                x=kernel.state.pose.x, y=kernel.state.pose.y,
                heading=kernel.state.pose.heading, mode=mode.value,
                rejected_recent=rejected_recent,
                pos_trace=float(kernel.state.cov[0, 0] + kernel.state.cov[1, 1]))
            (traj_main if fid == "main" else traj_backup).append(point)

    report = metrics.compute_report(traj_main, traj_backup, rt.events,
                                    rt.stats_recorder.rows, truth)

    # -- artifacts --------------------------------------------------------
    map_file = None
    if cfg.map_path or (recorded and recorded.get("map_file")):
        map_file = "map.json"
        mapdb.save(out_dir / map_file)
    config_dump = {
        "scenario": scenario.to_dict(),
        "map_file": map_file,
        "tree_path": cfg.tree_path,
        "behavior": _behavior_dict(cfg.behavior),
        "tuning": _tuning_dict(cfg.tuning),
    }
    with open(out_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config_dump, fh, sort_keys=True, indent=1)
        fh.write("\n")
    simulator.save_truth(out_dir / "truth.jsonl", truth)
    if cfg.record or cfg.replay_path:
        simulator.save_measurements(out_dir / "measurements.jsonl", measurements)
    _write_jsonl(out_dir / "events.jsonl", (e.to_dict() for e in rt.events))
    _write_jsonl(out_dir / "stats.jsonl",
                 (stats_to_dict(s) for s in rt.stats_recorder.rows))
    _write_jsonl(out_dir / "trajectory_main.jsonl", (p.to_dict() for p in traj_main))
    _write_jsonl(out_dir / "trajectory_backup.jsonl", (p.to_dict() for p in traj_backup))
    with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")
    with open(out_dir / "timing.json", "w", encoding="utf-8") as fh:
        json.dump(metrics.timing_summary(timing), fh, sort_keys=True, indent=1)
        fh.write("\n")
    metrics.write_timing_histograms(timing, out_dir / "timing_hist.csv")
    if traj_main:
        metrics.export_trajectory_geojson(traj_main, out_dir / "trajectory_main.geojson")
    if traj_backup:
        metrics.export_trajectory_geojson(traj_backup, out_dir / "trajectory_backup.geojson")
    if trace_fh is not None:
        trace_fh.close()

    main_state = rt.kernels["main"].state
    exit_code = 2 if (not main_state.initialized
                      or main_state.health is FilterHealth.LOST) else 0
    return RunResult(exit_code=exit_code, out_dir=out_dir, report=report,
                     runtime=rt, traj_main=traj_main, traj_backup=traj_backup)


def _behavior_dict(b: BehaviorConfig) -> dict:
    return {
        "reject_streak": b.reject_streak, "accept_streak": b.accept_streak,
        "stale_fail_s": b.stale_fail_s, "readiness_max_age_s": b.readiness_max_age_s,
        "gps_fix_max_age_s": b.gps_fix_max_age_s,
        "hysteresis_ticks": b.hysteresis_ticks,
        "attribution_window_s": b.attribution_window_s,
        "cross_heading_diff_deg": b.cross_heading_diff_deg,
        "reset_cov_diag": list(b.reset_cov_diag),
    }


def _tuning_dict(t: FilterTuning) -> dict:
    return {
        "process": {"v_psd": t.process.v_psd, "omega_psd": t.process.omega_psd,
                    "floor": list(t.process.floor)},
        "lidar_r": list(t.lidar_r),
        "init_cov_diag": list(t.init_cov_diag),
        "health": {"good_window_s": t.health.good_window_s,
                   "good_pos_trace": t.health.good_pos_trace,
                   "lost_pos_trace": t.health.lost_pos_trace,
                   "lost_dr_distance": t.health.lost_dr_distance},
    }


def recompute_report(run_dir) -> metrics.RunReport:
    """Rebuild the report purely from a run directory's logs."""
    run_dir = Path(run_dir)
    traj_main = [metrics.TrajectoryPoint.from_dict(r)
                 for r in _read_jsonl(run_dir / "trajectory_main.jsonl")]
    traj_backup = [metrics.TrajectoryPoint.from_dict(r)
                   for r in _read_jsonl(run_dir / "trajectory_backup.jsonl")]
    events = [event_from_dict(r) for r in _read_jsonl(run_dir / "events.jsonl")]
    stats = [stats_from_dict(r) for r in _read_jsonl(run_dir / "stats.jsonl")]
    truth = simulator.load_truth(run_dir / "truth.jsonl")
    return metrics.compute_report(traj_main, traj_backup, events, stats, truth)
