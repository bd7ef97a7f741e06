"""Extended Kalman filtering for the planar vehicle state.

State is (x, y, heading) with a 3x3 covariance.  The motion model is an Euler
unicycle step

    x'  = x + v dt cos(heading)
    y'  = y + v dt sin(heading)
    h'  = wrap(heading + omega dt)

with analytic Jacobian F and process noise Q(dt) = Q_rate(heading) * dt, where
Q_rate maps the (v, omega) input noise densities through the motion model plus
a diagonal floor.  Updates are gated on the Mahalanobis distance of the
innovation: d <= 2 ("2 sigma"), d <= 3 ("3 sigma") or unconditionally ("all").

GPS fixes update position only (H = [I2 0]); lidar scan alignments update the
full pose (H = I3) after an against-history heading check.  The covariance is
symmetrized after every step and updates use the Joseph form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .types import (
    FeatureKind,
    GpsFix,
    GpsStatus,
    LidarScan,
    MapFeature,
    Pose2D,
    normalize_heading,
    symmetrize,
)

_KIND_CODE = {FeatureKind.POLE: 0, FeatureKind.CORNER: 1}


class GateBound(Enum):
    """Outlier-rejection bound, ordered from strict to permissive."""

    TWO_SIGMA = 2.0
    THREE_SIGMA = 3.0
    ALL = math.inf

    @property
    def threshold(self) -> float:
        return self.value

    def accepts(self, d: float) -> bool:
        return d <= self.value


GATE_LADDER = (GateBound.TWO_SIGMA, GateBound.THREE_SIGMA, GateBound.ALL)


class FilterMode(Enum):
    LIDAR_DR = "LIDAR_DR"
    GPS_DR = "GPS_DR"
    DR_ONLY = "DR_ONLY"
    UNINITIALIZED = "UNINITIALIZED"


class FilterHealth(IntEnum):
    """Orderable health lattice: GOOD > DEGRADED > LOST."""

    LOST = 0
    DEGRADED = 1
    GOOD = 2


class UpdateOutcome(Enum):
    ACCEPTED = "ACCEPTED"
    REJECTED = "REJECTED"
    NOT_CONVERGED = "NOT_CONVERGED"
    NO_FIX = "NO_FIX"


class Sensor(Enum):
    GPS = "GPS"
    LIDAR = "LIDAR"


@dataclass(frozen=True, slots=True)
class UpdateStats:
    """One gate decision (or non-attempt) on a filter, as seen by the BT."""

    t_us: int
    filter_id: str
    sensor: Sensor
    outcome: UpdateOutcome
    mahalanobis: Optional[float] = None
    innovation: Optional[tuple[float, ...]] = None
    bound: Optional[GateBound] = None
    shift: Optional[float] = None          # |posterior - prior| position move, ACCEPTED only
    pose: Optional[tuple[float, float, float]] = None  # posterior pose at decision time
    rms_residual: Optional[float] = None   # lidar alignment residual
    reason: Optional[str] = None


@dataclass(slots=True)
class ProcessNoise:
    """Input noise densities (per second) plus an additive diagonal floor."""

    v_psd: float = 0.001        # (m/s)^2 * s
    omega_psd: float = 1e-5     # (rad/s)^2 * s
    floor: tuple[float, float, float] = (0.1, 0.1, 2e-4)

    def floor_array(self) -> np.ndarray:
        return np.array(self.floor, dtype=float)


@dataclass(slots=True)
class HealthThresholds:
    """Tunable criteria behind GOOD / DEGRADED / LOST."""

    good_window_s: float = 5.0       # accepted update recency for GOOD
    good_pos_trace: float = 4.0      # m^2, trace of position covariance
    lost_pos_trace: float = 100.0    # m^2
    lost_dr_distance: float = 200.0  # m of dead reckoning without any accept


@dataclass(slots=True)
class AlignmentConfig:
    association_radius: float = 2.0   # m
    min_matches: int = 3
    max_rms: float = 0.5              # m
    sensor_range: float = 50.0        # m, candidate query radius


@dataclass(slots=True)
class FilterState:
    """Belief of one filter plus the bookkeeping the supervisor reads."""

    pose: Pose2D
    cov: np.ndarray
    t_us: int
    initialized: bool = True
    mode: FilterMode = FilterMode.DR_ONLY
    health: FilterHealth = FilterHealth.DEGRADED
    last_accept_us: Optional[int] = None
    dr_distance_since_update: float = 0.0
    recovering: bool = False  # reset applied, waiting for one accepted update

    @classmethod
    def uninitialized(cls) -> "FilterState":
        return cls(pose=Pose2D(0.0, 0.0, 0.0), cov=np.eye(3) * 1e6, t_us=0,
                   initialized=False, mode=FilterMode.UNINITIALIZED,
                   health=FilterHealth.LOST)

    def copy(self) -> "FilterState":
        return replace(self, cov=self.cov.copy())


@dataclass(frozen=True, slots=True)
class AlignmentResult:
    """Vehicle pose implied by a scan-to-map rigid fit."""

    pose: Pose2D
    matched_count: int
    rms_residual: float
    converged: bool


@dataclass(frozen=True, slots=True)
class GateDecision:
    accepted: bool
    mahalanobis: float
    ok: bool = True  # False when the innovation covariance was singular


def motion_jacobian(heading: float, v: float, dt: float) -> np.ndarray:
    """Analytic Jacobian of the Euler step; finite differences must match."""
    return np.asarray(kernels.motion_jacobian(heading, v, dt))


def predict(state: FilterState, v: float, omega: float, dt: float,
            q: ProcessNoise) -> FilterState:
    """Dead-reckon the belief forward by ``dt`` seconds."""
    if not state.initialized:
        raise ValueError("cannot predict an uninitialized filter")
    if dt < 0.0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    if dt == 0.0:
        return state.copy()
    pose, cov = kernels.predict_step(
        state.pose.as_array(), state.cov, v, omega, dt,
        q.v_psd, q.omega_psd, q.floor_array())
    out = state.copy()
    out.pose = Pose2D(pose[0], pose[1], pose[2])
    out.cov = np.asarray(cov)
    out.t_us = state.t_us + round(dt * 1e6)
    out.dr_distance_since_update += abs(v) * dt
    return out


def gate(innovation: np.ndarray, s_mat: np.ndarray, bound: GateBound) -> GateDecision:
    """Mahalanobis gate: accept iff d <= bound threshold.

    A singular innovation covariance yields a rejected decision flagged
    ``ok=False`` (upstream treats it as a non-converged update).
    """
    nu = np.asarray(innovation, dtype=float)
    d2, ok = kernels.gate_d2(nu, np.asarray(s_mat, dtype=float))
    if not ok or d2 < 0.0:
        return GateDecision(accepted=False, mahalanobis=math.inf, ok=False)
    d = math.sqrt(d2)
    return GateDecision(accepted=bound.accepts(d), mahalanobis=d)


def _joseph_update(state: FilterState, h_mat: np.ndarray, nu: np.ndarray,
                   s_mat: np.ndarray, r_mat: np.ndarray) -> FilterState:
    k_gain = state.cov @ h_mat.T @ np.linalg.inv(s_mat)
    delta = k_gain @ nu
    ident = np.eye(3)
    a = ident - k_gain @ h_mat
    cov = a @ state.cov @ a.T + k_gain @ r_mat @ k_gain.T
    out = state.copy()
    out.pose = Pose2D(state.pose.x + delta[0], state.pose.y + delta[1],
                      state.pose.heading + (delta[2] if delta.shape[0] > 2 else 0.0))
    out.cov = symmetrize(cov)
    return out


def _on_accept(state: FilterState, t_us: int) -> None:
    state.last_accept_us = t_us
    state.dr_distance_since_update = 0.0
    if state.recovering:
        state.recovering = False
        state.health = FilterHealth.GOOD


def update_gps(state: FilterState, fix: GpsFix, bound: GateBound,
               t_us: int, filter_id: str = "main") -> tuple[FilterState, UpdateStats]:
    """Position-only EKF update from a GPS fix, Mahalanobis gated."""
    if not state.initialized:
        raise ValueError("cannot update an uninitialized filter")
    if fix.status is GpsStatus.NO_FIX:
        stats = UpdateStats(t_us=t_us, filter_id=filter_id, sensor=Sensor.GPS,
                            outcome=UpdateOutcome.NO_FIX, bound=bound,
                            pose=_pose_tuple(state))
        return state, stats
    h_mat = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    r_mat = fix.cov()
    nu = fix.position() - np.array([state.pose.x, state.pose.y])
    s_mat = h_mat @ state.cov @ h_mat.T + r_mat
    decision = gate(nu, s_mat, bound)
    if not decision.ok:
        stats = UpdateStats(t_us=t_us, filter_id=filter_id, sensor=Sensor.GPS,
                            outcome=UpdateOutcome.NOT_CONVERGED, bound=bound,
                            pose=_pose_tuple(state), reason="singular_innovation_cov")
        return state, stats
    if not decision.accepted:
        stats = UpdateStats(t_us=t_us, filter_id=filter_id, sensor=Sensor.GPS,
                            outcome=UpdateOutcome.REJECTED,
                            mahalanobis=decision.mahalanobis,
                            innovation=tuple(float(x) for x in nu), bound=bound,
                            pose=_pose_tuple(state))
        return state, stats
    new_state = _joseph_update(state, h_mat, nu, s_mat, r_mat)
    shift = new_state.pose.distance_to(state.pose)
    _on_accept(new_state, t_us)
    stats = UpdateStats(t_us=t_us, filter_id=filter_id, sensor=Sensor.GPS,
                        outcome=UpdateOutcome.ACCEPTED,
                        mahalanobis=decision.mahalanobis,
                        innovation=tuple(float(x) for x in nu), bound=bound,
                        shift=shift, pose=_pose_tuple(new_state))
    return new_state, stats


def align_scan(scan: LidarScan, prior: FilterState,
               candidates: Sequence[MapFeature],
               cfg: AlignmentConfig) -> AlignmentResult:
    """Fit the vehicle pose that maps scan features onto the prior map.

    Observed features are transformed by the prior pose, associated to the
    nearest same-kind map feature within the association radius, and the
    matched pairs are aligned with the closed-form 2D rigid least-squares
    solution.  Fewer than ``min_matches`` pairs or an RMS residual above
    ``max_rms`` leaves the result non-converged.
    """
    if not prior.initialized:
        raise ValueError("alignment needs an initialized prior")
    n = len(scan.features)
    m = len(candidates)
    if n == 0 or m == 0:
        return AlignmentResult(prior.pose, 0, math.inf, False)
    c, s = math.cos(prior.pose.heading), math.sin(prior.pose.heading)
    obs_local = np.array([[f.x, f.y] for f in scan.features])
    obs_map = np.empty_like(obs_local)
    obs_map[:, 0] = c * obs_local[:, 0] - s * obs_local[:, 1] + prior.pose.x
    obs_map[:, 1] = s * obs_local[:, 0] + c * obs_local[:, 1] + prior.pose.y
    obs_kind = np.array([_KIND_CODE[f.kind] for f in scan.features], dtype=np.int64)
    cand_xy = np.array([[f.x, f.y] for f in candidates])
    cand_kind = np.array([_KIND_CODE[f.kind] for f in candidates], dtype=np.int64)
    obs_idx, cand_idx = kernels.associate(obs_map, obs_kind, cand_xy, cand_kind,
                                          cfg.association_radius)
    matched = int(obs_idx.shape[0])
    if matched < cfg.min_matches:
        return AlignmentResult(prior.pose, matched, math.inf, False)
    tx, ty, theta, rms = kernels.rigid_align(obs_local[obs_idx], cand_xy[cand_idx])
    pose = Pose2D(tx, ty, theta)
    converged = matched >= cfg.min_matches and rms <= cfg.max_rms
    return AlignmentResult(pose, matched, float(rms), converged)


def heading_history_ok(heading: float, history: Sequence[float],
                       max_diff_rad: float = math.radians(10.0)) -> bool:
    """True when no history exists or some past heading is within the bound."""
    if not history:
        return True
    return any(abs(normalize_heading(heading - h)) <= max_diff_rad for h in history)


def update_lidar(state: FilterState, result: AlignmentResult, bound: GateBound,
                 history_ok: bool, r_diag: tuple[float, float, float],
                 t_us: int, filter_id: str = "main") -> tuple[FilterState, UpdateStats]:
    """Full-pose EKF update from a scan alignment.

    Non-converged alignments pass through untouched; a failed against-history
    heading check rejects regardless of the Mahalanobis distance.
    """
    if not state.initialized:
        raise ValueError("cannot update an uninitialized filter")
    if not result.converged:
        stats = UpdateStats(t_us=t_us, filter_id=filter_id, sensor=Sensor.LIDAR,
                            outcome=UpdateOutcome.NOT_CONVERGED, bound=bound,
                            pose=_pose_tuple(state), rms_residual=result.rms_residual
                            if math.isfinite(result.rms_residual) else None)
        return state, stats
    h_mat = np.eye(3)
    r_mat = np.diag([r_diag[0] ** 2, r_diag[1] ** 2, r_diag[2] ** 2])
    nu = np.array([
        result.pose.x - state.pose.x,
        result.pose.y - state.pose.y,
        normalize_heading(result.pose.heading - state.pose.heading),
    ])
    s_mat = state.cov + r_mat
    decision = gate(nu, s_mat, bound)
    if not decision.ok:
        stats = UpdateStats(t_us=t_us, filter_id=filter_id, sensor=Sensor.LIDAR,
                            outcome=UpdateOutcome.NOT_CONVERGED, bound=bound,
                            pose=_pose_tuple(state), reason="singular_innovation_cov")
        return state, stats
    if not history_ok:
        stats = UpdateStats(t_us=t_us, filter_id=filter_id, sensor=Sensor.LIDAR,
                            outcome=UpdateOutcome.REJECTED,
                            mahalanobis=decision.mahalanobis,
                            innovation=tuple(float(x) for x in nu), bound=bound,
                            pose=_pose_tuple(state), reason="history_gate",
                            rms_residual=result.rms_residual)
        return state, stats
    if not decision.accepted:
        stats = UpdateStats(t_us=t_us, filter_id=filter_id, sensor=Sensor.LIDAR,
                            outcome=UpdateOutcome.REJECTED,
                            mahalanobis=decision.mahalanobis,
                            innovation=tuple(float(x) for x in nu), bound=bound,
                            pose=_pose_tuple(state), rms_residual=result.rms_residual)
        return state, stats
    new_state = _joseph_update(state, h_mat, nu, s_mat, r_mat)
    shift = new_state.pose.distance_to(state.pose)
    _on_accept(new_state, t_us)
    stats = UpdateStats(t_us=t_us, filter_id=filter_id, sensor=Sensor.LIDAR,
                        outcome=UpdateOutcome.ACCEPTED,
                        mahalanobis=decision.mahalanobis,
                        innovation=tuple(float(x) for x in nu), bound=bound,
                        shift=shift, pose=_pose_tuple(new_state),
                        rms_residual=result.rms_residual)
    return new_state, stats


def reset(state: FilterState, target: Pose2D, target_cov: np.ndarray,
          t_us: int) -> tuple[FilterState, float]:
    """Overwrite the belief; returns the new state and the position jump."""
    jump = state.pose.distance_to(target) if state.initialized else 0.0
    out = state.copy()
    out.pose = target
    out.cov = symmetrize(np.asarray(target_cov, dtype=float).copy())
    out.t_us = t_us
    out.initialized = True
    out.health = FilterHealth.DEGRADED
    out.recovering = True
    out.dr_distance_since_update = 0.0
    return out, jump


def health_assess(state: FilterState, now_us: int,
                  thresholds: HealthThresholds) -> FilterHealth:
    """Classify a filter as GOOD / DEGRADED / LOST from recency and spread."""
    if not state.initialized:
        return FilterHealth.LOST
    pos_trace = float(state.cov[0, 0] + state.cov[1, 1])
    if (state.dr_distance_since_update > thresholds.lost_dr_distance
            or pos_trace > thresholds.lost_pos_trace):
        return FilterHealth.LOST
    if state.recovering:
        return FilterHealth.DEGRADED
    fresh = (state.last_accept_us is not None
             and (now_us - state.last_accept_us) <= thresholds.good_window_s * 1e6)
    if fresh and pos_trace <= thresholds.good_pos_trace:
        return FilterHealth.GOOD
    return FilterHealth.DEGRADED


def _pose_tuple(state: FilterState) -> tuple[float, float, float]:
    return (state.pose.x, state.pose.y, state.pose.heading)
