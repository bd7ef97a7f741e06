"""Run evaluation: per-mode distance split, events, accuracy, exports.

The report is a pure function of the recorded logs, so recomputing it from a
run directory reproduces the live-computed report byte for byte.  Wall-clock
timing is kept OUT of the report and written to a separate artifact, keeping
reports deterministic for identical (config, seed).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .behaviors import TransitionEvent, TransitionKind
from .estimation import Sensor, UpdateOutcome, UpdateStats
from .simulator import TruthTrajectory

MODES = ("LIDAR_DR", "GPS_DR", "DR_ONLY")

# trajectory point colors (hex) keyed by (filter kind, mode / flag)
COLOR_LIDAR = "#2ca02c"     # green: lidar feature updating
COLOR_GPS = "#d62728"       # red: GPS updating
COLOR_DR = "#1f77b4"        # blue: dead reckoning / no fix
COLOR_REJECTED = "#ffbf00"  # yellow: GPS measurements being rejected


@dataclass(slots=True)
class TrajectoryPoint:
    tick: int
    t_us: int
    filter_id: str
    x: float
    y: float
    heading: float
    mode: str
    rejected_recent: bool = False
    pos_trace: float = 0.0

    def to_dict(self) -> dict:
        return {"tick": self.tick, "t_us": self.t_us, "filter": self.filter_id,
                "x": self.x, "y": self.y, "heading": self.heading,
                "mode": self.mode, "rejected_recent": self.rejected_recent,
                "pos_trace": self.pos_trace}

    @classmethod
    def from_dict(cls, row: dict) -> "TrajectoryPoint":
        return cls(tick=row["tick"], t_us=row["t_us"], filter_id=row["filter"],
                   x=row["x"], y=row["y"], heading=row["heading"], mode=row["mode"],
                   rejected_recent=row.get("rejected_recent", False),
                   pos_trace=row.get("pos_trace", 0.0))


@dataclass(slots=True)
class RunReport:
    distance_pct: dict[str, float] = field(default_factory=dict)
    distance_total_m: float = 0.0
    switch_count: int = 0
    recovery_count: int = 0
    jump_distances: list[float] = field(default_factory=list)
    jump_mean_m: Optional[float] = None
    rmse_by_mode: dict[str, float] = field(default_factory=dict)
    std_by_mode: dict[str, float] = field(default_factory=dict)
    rmse_overall: dict[str, float] = field(default_factory=dict)
    lidar_frame_outcomes: dict[str, float] = field(default_factory=dict)
    mode_sequence: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "distance_pct": {k: self.distance_pct[k] for k in sorted(self.distance_pct)},
            "distance_total_m": self.distance_total_m,
            "switch_count": self.switch_count,
            "recovery_count": self.recovery_count,
            "jump_distances_m": list(self.jump_distances),
            "jump_mean_m": self.jump_mean_m,
            "rmse_by_mode_m": {k: self.rmse_by_mode[k] for k in sorted(self.rmse_by_mode)},
            "std_by_mode_m": {k: self.std_by_mode[k] for k in sorted(self.std_by_mode)},
            "rmse_overall_m": {k: self.rmse_overall[k] for k in sorted(self.rmse_overall)},
            "lidar_frame_outcomes_pct": {k: self.lidar_frame_outcomes[k]
                                         for k in sorted(self.lidar_frame_outcomes)},
            "mode_sequence": list(self.mode_sequence),
        }


def _collapse_modes(points: Sequence[TrajectoryPoint]) -> list[str]:
    out: list[str] = []
    for p in points:
        if p.mode == "UNINITIALIZED":
            continue
        if not out or out[-1] != p.mode:
            out.append(p.mode)
    return out


def compute_report(traj_main: Sequence[TrajectoryPoint],
                   traj_backup: Sequence[TrajectoryPoint],
                   events: Sequence[TransitionEvent],
                   stats: Sequence[UpdateStats],
                   truth: Optional[TruthTrajectory]) -> RunReport:
    """Aggregate one run; raises on time-misaligned inputs."""
    report = RunReport()
    main = [p for p in traj_main if p.mode != "UNINITIALIZED"]
    if len(traj_main) >= 2:
        dist: dict[str, float] = {}
        for a, b in zip(traj_main[:-1], traj_main[1:]):
            if a.mode == "UNINITIALIZED":
                continue
            seg = math.hypot(b.x - a.x, b.y - a.y)
            dist[a.mode] = dist.get(a.mode, 0.0) + seg
        total = sum(dist.values())
        report.distance_total_m = total
        if total > 0:
            report.distance_pct = {m: 100.0 * d / total for m, d in dist.items()}
    report.mode_sequence = _collapse_modes(traj_main)

    report.switch_count = sum(1 for e in events if e.kind is TransitionKind.SENSOR_SWITCH)
    report.recovery_count = sum(1 for e in events if e.kind is TransitionKind.LOSS_RECOVERY)
    report.jump_distances = [e.jump_distance for e in events]
    if report.jump_distances:
        report.jump_mean_m = float(np.mean(report.jump_distances))

    if truth is not None:
        for fid, traj in (("main", main), ("backup", traj_backup)):
            errors: dict[str, list[float]] = {}
            all_err: list[float] = []
            for p in traj:
                if p.mode == "UNINITIALIZED":
                    continue
                tp = truth.pose_at(p.t_us)
                if abs(int(p.t_us) - int(truth.t_us[truth.index_of(p.t_us)])) > 10_000:
                    raise ValueError("trajectory and truth logs are misaligned")
                err = math.hypot(p.x - tp.x, p.y - tp.y)
                errors.setdefault(p.mode, []).append(err)
                all_err.append(err)
            if all_err:
                report.rmse_overall[fid] = float(np.sqrt(np.mean(np.square(all_err))))
            if fid == "main":
                for mode, errs in errors.items():
                    report.rmse_by_mode[mode] = float(np.sqrt(np.mean(np.square(errs))))
                    report.std_by_mode[mode] = float(np.std(errs))

    lidar = [s for s in stats if s.filter_id == "main" and s.sensor is Sensor.LIDAR
             and s.outcome in (UpdateOutcome.ACCEPTED, UpdateOutcome.REJECTED,
                               UpdateOutcome.NOT_CONVERGED)]
    if lidar:
        n = len(lidar)
        for outcome in (UpdateOutcome.ACCEPTED, UpdateOutcome.REJECTED,
                        UpdateOutcome.NOT_CONVERGED):
            count = sum(1 for s in lidar if s.outcome is outcome)
            report.lidar_frame_outcomes[outcome.value] = 100.0 * count / n
    return report


def point_color(p: TrajectoryPoint) -> str:
    if p.mode == "LIDAR_DR":
        return COLOR_LIDAR
    if p.mode == "GPS_DR":
        return COLOR_GPS
    if p.rejected_recent:
        return COLOR_REJECTED
    return COLOR_DR


def export_trajectory_geojson(points: Sequence[TrajectoryPoint], path) -> None:
    """Mode-colored GeoJSON point collection (local map-frame coordinates)."""
    if not points:
        raise ValueError("cannot export an empty trajectory")
    features = [{
        "type": "Feature",
        "geometry": {"type": "Point", "coordinates": [p.x, p.y]},
        "properties": {"t": p.t_us / 1e6, "mode": p.mode, "filter": p.filter_id,
                       "color": point_color(p)},
    } for p in points]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"type": "FeatureCollection", "features": features},
                  fh, sort_keys=True)
        fh.write("\n")


# --- timing (non-deterministic; written separately) --------------------------


def timing_summary(samples: dict[str, list[float]]) -> dict:
    out: dict[str, dict] = {}
    for name, values in samples.items():
        if not values:
            out[name] = {"count": 0}
            continue
        arr = np.array(values)
        out[name] = {
            "count": int(arr.size),
            "mean_ms": float(arr.mean() * 1e3),
            "p50_ms": float(np.percentile(arr, 50) * 1e3),
            "p95_ms": float(np.percentile(arr, 95) * 1e3),
            "max_ms": float(arr.max() * 1e3),
        }
    return out


def write_timing_histograms(samples: dict[str, list[float]], path,
                            bins: int = 20) -> None:
    """CSV histogram per timing series: series,bin_low_ms,bin_high_ms,count."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("series,bin_low_ms,bin_high_ms,count\n")
        for name in sorted(samples):
            values = samples[name]
            if not values:
                continue
            arr = np.array(values) * 1e3
            counts, edges = np.histogram(arr, bins=bins)
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                fh.write(f"{name},{lo:.6f},{hi:.6f},{int(c)}\n")
