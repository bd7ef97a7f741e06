"""Concrete pipeline modules wiring sensors, models, filters and sinks.

Canonical online graph (edges marked * are made and broken by the supervisor
at runtime):

    encoder-src ─┐
    gyro-src    ─┴→ motion-model ──────────→ main-filter ──→ sinks
    gps-src ───────→ gps-model ──*→ main    └→ backup-filter ─→ sinks
    lidar-src ─────→ lidar-model ─*→ main

The lidar model is the sensor front end: it always processes scans (so the
supervisor can check initialisation readiness) and only the observation edge
into a kernel is switched.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import estimation as est
from .estimation import (
    AlignmentConfig,
    FilterState,
    GateBound,
    HealthThresholds,
    ProcessNoise,
    Sensor,
    UpdateOutcome,
    UpdateStats,
)
from .mapdb import MapDb
from .pipeline import Layer, PipelineModule, PortType
from .types import (
    EncoderSpeed,
    GpsFix,
    GyroYawRate,
    LidarScan,
    Measurement,
    Pose2D,
)

_log = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class MotionInput:
    t_us: int
    v: float
    omega: float


@dataclass(frozen=True, slots=True)
class GpsObservation:
    t_us: int
    fix: GpsFix


@dataclass(frozen=True, slots=True)
class LidarPoseObservation:
    t_us: int
    result: est.AlignmentResult
    history_ok: bool


@dataclass(frozen=True, slots=True)
class StateEstimate:
    t_us: int
    filter_id: str
    pose: Pose2D
    pos_trace: float
    initialized: bool


class MeasurementSource(PipelineModule):
    """Source-interface entry point for one measurement stream."""

    def __init__(self, name: str):
        super().__init__(name, Layer.SOURCE,
                         inputs={"in": PortType.RAW_MEASUREMENT},
                         outputs={"out": PortType.RAW_MEASUREMENT})

    def on_input(self, port, payload, emit):
        emit("out", payload)


class MotionSynchronizer(PipelineModule):
    """Combines encoder and gyro into motion inputs at encoder ticks.

    The most recent gyro yaw rate is zero-order held at each encoder sample.
    """

    def __init__(self, name: str = "motion-model"):
        super().__init__(name, Layer.MODEL,
                         inputs={"in": PortType.RAW_MEASUREMENT},
                         outputs={"motion": PortType.MOTION_INPUT})
        self._omega = 0.0

    def on_input(self, port, payload, emit):
        if not isinstance(payload, Measurement):
            return
        if isinstance(payload.payload, GyroYawRate):
            self._omega = payload.payload.omega
        elif isinstance(payload.payload, EncoderSpeed):
            emit("motion", MotionInput(payload.t_us, payload.payload.v, self._omega))


class GpsObservationModel(PipelineModule):
    """Wraps GPS fixes into observations for the kernels."""

    def __init__(self, name: str = "gps-model"):
        super().__init__(name, Layer.MODEL,
                         inputs={"in": PortType.RAW_MEASUREMENT},
                         outputs={"obs": PortType.OBSERVATION})

    def on_input(self, port, payload, emit):
        if isinstance(payload, Measurement) and isinstance(payload.payload, GpsFix):
            emit("obs", GpsObservation(payload.t_us, payload.payload))


class LidarAlignModel(PipelineModule):
    """Scan-to-map front end: association, rigid alignment, history gate.

    Runs on every scan regardless of whether its observation edge is
    connected, publishing the latest alignment to the blackboard so the
    supervisor can judge front-end readiness.
    """

    def __init__(self, mapdb: MapDb, state_provider: Callable[[], FilterState],
                 align_cfg: AlignmentConfig,
                 history_max_diff_rad: float = math.radians(10.0),
                 bb_post: Optional[Callable[[str, object], None]] = None,
                 name: str = "lidar-model"):
        super().__init__(name, Layer.MODEL,
                         inputs={"in": PortType.RAW_MEASUREMENT},
                         outputs={"obs": PortType.OBSERVATION})
        self.mapdb = mapdb
        self.state_provider = state_provider
        self.align_cfg = align_cfg
        self.history_max_diff_rad = history_max_diff_rad
        self.bb_post = bb_post
        self.latest: Optional[LidarPoseObservation] = None

    def on_input(self, port, payload, emit):
        if not (isinstance(payload, Measurement) and isinstance(payload.payload, LidarScan)):
            return
        prior = self.state_provider()
        if not prior.initialized:
            obs = LidarPoseObservation(
                payload.t_us,
                est.AlignmentResult(Pose2D(0, 0, 0), 0, math.inf, False), True)
        else:
            candidates = self.mapdb.query_features(
                (prior.pose.x, prior.pose.y),
                self.align_cfg.sensor_range + self.align_cfg.association_radius + 10.0)
            result = est.align_scan(payload.payload, prior, candidates, self.align_cfg)
            history_ok = True
            if result.converged:
                history = self.mapdb.query_lidar_history((result.pose.x, result.pose.y))
                history_ok = est.heading_history_ok(
                    result.pose.heading, history, self.history_max_diff_rad)
            obs = LidarPoseObservation(payload.t_us, result, history_ok)
        self.latest = obs
        if self.bb_post is not None:
            self.bb_post("frontend/lidar", obs)
        emit("obs", obs)


@dataclass(slots=True)
class FilterTuning:
    process: ProcessNoise = field(default_factory=ProcessNoise)
    lidar_r: tuple[float, float, float] = (0.25, 0.25, math.radians(1.0))
    init_cov_diag: tuple[float, float, float] = (2.0, 2.0, math.radians(5.0) ** 2)
    health: HealthThresholds = field(default_factory=HealthThresholds)


class FilterKernelModule(PipelineModule):
    """EKF kernel: zero-order-hold prediction plus gated sensor updates.

    Processing failures never abort a dispatch: they surface as
    NOT_CONVERGED update statistics.
    """

    def __init__(self, filter_id: str, tuning: FilterTuning):
        super().__init__(f"{filter_id}-filter", Layer.KERNEL,
                         inputs={"motion": PortType.MOTION_INPUT,
                                 "obs": PortType.OBSERVATION},
                         outputs={"state": PortType.STATE_ESTIMATE,
                                  "stats": PortType.UPDATE_STATS})
        self.filter_id = filter_id
        self.tuning = tuning
        self.state = FilterState.uninitialized()
        self.bound = GateBound.TWO_SIGMA
        self._held_v = 0.0
        self._held_omega = 0.0
        self.last_accept: dict[Sensor, tuple[int, float]] = {}   # sensor -> (t_us, shift)
        self.last_reject_us: dict[Sensor, int] = {}

    # -- supervisor-facing controls --------------------------------------

    def set_bound(self, bound: GateBound) -> None:
        self.bound = bound

    def initialize(self, pose: Pose2D, t_us: int) -> None:
        cov = np.diag(self.tuning.init_cov_diag).astype(float)
        self.state = FilterState(pose=pose, cov=cov, t_us=t_us,
                                 initialized=True, mode=est.FilterMode.DR_ONLY,
                                 health=est.FilterHealth.DEGRADED)

    def reset_to(self, pose: Pose2D, cov: np.ndarray, t_us: int) -> float:
        self.state, jump = est.reset(self.state, pose, cov, t_us)
        return jump

    def deinitialize(self) -> None:
        self.state = FilterState.uninitialized()
        self.last_accept.clear()
        self.last_reject_us.clear()

    # -- pipeline processing ---------------------------------------------

    def _predict_to(self, t_us: int) -> None:
        if not self.state.initialized:
            return
        dt = (t_us - self.state.t_us) / 1e6
        if dt > 0:
            self.state = est.predict(self.state, self._held_v, self._held_omega,
                                     dt, self.tuning.process)

    def on_input(self, port, payload, emit):
        if isinstance(payload, MotionInput):
            self._predict_to(payload.t_us)
            self._held_v = payload.v
            self._held_omega = payload.omega
            self._emit_state(payload.t_us, emit)
            return
        if isinstance(payload, GpsObservation):
            stats = self._safe_update(
                payload.t_us, Sensor.GPS,
                lambda: est.update_gps(self.state, payload.fix, self.bound,
                                       payload.t_us, self.filter_id))
        elif isinstance(payload, LidarPoseObservation):
            stats = self._safe_update(
                payload.t_us, Sensor.LIDAR,
                lambda: est.update_lidar(self.state, payload.result, self.bound,
                                         payload.history_ok, self.tuning.lidar_r,
                                         payload.t_us, self.filter_id))
        else:
            return
        if stats.outcome is UpdateOutcome.ACCEPTED:
            self.last_accept[stats.sensor] = (stats.t_us, stats.shift or 0.0)
        elif stats.outcome is UpdateOutcome.REJECTED:
            self.last_reject_us[stats.sensor] = stats.t_us
        emit("stats", stats)
        self._emit_state(stats.t_us, emit)

    def _safe_update(self, t_us: int, sensor: Sensor, fn) -> UpdateStats:
        if not self.state.initialized:
            return UpdateStats(t_us=t_us, filter_id=self.filter_id, sensor=sensor,
                               outcome=UpdateOutcome.NOT_CONVERGED,
                               reason="uninitialized")
        try:
            self._predict_to(t_us)
            self.state, stats = fn()
            return stats
        except Exception:
            _log.exception("%s update failed on %s", self.filter_id, sensor)
            return UpdateStats(t_us=t_us, filter_id=self.filter_id, sensor=sensor,
                               outcome=UpdateOutcome.NOT_CONVERGED,
                               reason="kernel_error",
                               pose=(self.state.pose.x, self.state.pose.y,
                                     self.state.pose.heading))

    def _emit_state(self, t_us: int, emit) -> None:
        emit("state", StateEstimate(
            t_us=t_us, filter_id=self.filter_id, pose=self.state.pose,
            pos_trace=float(self.state.cov[0, 0] + self.state.cov[1, 1]),
            initialized=self.state.initialized))


class StatsRecorder(PipelineModule):
    """Destination sink: keeps every update statistic in arrival order."""

    def __init__(self, name: str = "stats-recorder"):
        super().__init__(name, Layer.SINK,
                         inputs={"stats": PortType.UPDATE_STATS}, outputs={})
        self.rows: list[UpdateStats] = []

    def on_input(self, port, payload, emit):
        if isinstance(payload, UpdateStats):
            self.rows.append(payload)


class TrajectoryRecorder(PipelineModule):
    """Destination sink: latest state estimate per filter."""

    def __init__(self, name: str = "trajectory-recorder"):
        super().__init__(name, Layer.SINK,
                         inputs={"state": PortType.STATE_ESTIMATE}, outputs={})
        self.latest: dict[str, StateEstimate] = {}

    def on_input(self, port, payload, emit):
        if isinstance(payload, StateEstimate):
            self.latest[payload.filter_id] = payload


class BlackboardPublisher(PipelineModule):
    """Destination sink: publishes stats windows and states to the blackboard."""

    WINDOW = 40

    def __init__(self, bb_post: Callable[[str, object], None],
                 name: str = "blackboard-publisher"):
        super().__init__(name, Layer.SINK,
                         inputs={"stats": PortType.UPDATE_STATS,
                                 "state": PortType.STATE_ESTIMATE},
                         outputs={})
        self._post = bb_post
        self._windows: dict[tuple[str, str], tuple] = {}

    def clear_window(self, filter_id: str, sensor: Sensor) -> None:
        self._windows.pop((filter_id, sensor.value), None)
        self._post(f"stats/{filter_id}/{sensor.value}", ())

    def on_input(self, port, payload, emit):
        if isinstance(payload, UpdateStats):
            key = (payload.filter_id, payload.sensor.value)
            window = self._windows.get(key, ()) + (payload,)
            if len(window) > self.WINDOW:
                window = window[-self.WINDOW:]
            self._windows[key] = window
            self._post(f"stats/{payload.filter_id}/{payload.sensor.value}", window)
        elif isinstance(payload, StateEstimate):
            self._post(f"state/{payload.filter_id}", payload)
