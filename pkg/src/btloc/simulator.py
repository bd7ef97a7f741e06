"""Deterministic 2D driving-world generator.

A scenario describes a route (lines, arcs, holds) with per-segment speeds,
typed zones along the arc length, feature densities and sensor noise.  Ground
truth is sampled at 100 Hz on a fixed-point (integer microsecond) clock;
measurements are synthesized at the nominal stream rates:

    gyro 100 Hz, encoder 10 Hz, lidar 10 Hz, GPS 1 Hz

All random draws come from one seeded generator in a fixed order (encoder
block, gyro block, GPS block, then lidar scans chronologically), so identical
(scenario, seed) pairs produce bit-identical streams.  Map features are drawn
from a separate ``feature_seed`` so the world is shared across noise seeds.

GPS_NOISY zones add a position bias (optionally inflating the real scatter)
that is deliberately NOT reflected in the reported covariance; GPS_DENIED
zones emit NO_FIX.  A CARPARK zone expands to a denied, feature-sparse core
flanked by feature-rich, noisy-GPS edge bands.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .types import (
    EncoderSpeed,
    FeatureKind,
    GpsFix,
    GpsStatus,
    GyroYawRate,
    LidarFeatureObs,
    LidarScan,
    MapFeature,
    Measurement,
    Pose2D,
    normalize_heading,
    s_to_us,
)

TRUTH_STEP_US = 10_000        # 100 Hz
GYRO_PERIOD_US = 10_000       # 100 Hz
ENCODER_PERIOD_US = 100_000   # 10 Hz
LIDAR_PERIOD_US = 100_000     # 10 Hz
GPS_PERIOD_US = 1_000_000     # 1 Hz


class ZoneKind(Enum):
    FEATURE_RICH = "FEATURE_RICH"
    FEATURE_SPARSE = "FEATURE_SPARSE"
    GPS_NOISY = "GPS_NOISY"
    GPS_DENIED = "GPS_DENIED"
    CARPARK = "CARPARK"


DEFAULT_DENSITIES = {ZoneKind.FEATURE_RICH: 0.05, ZoneKind.FEATURE_SPARSE: 0.002}


@dataclass(slots=True)
class Zone:
    """Route interval [s0, s1) in arc-length meters; later zones win overlaps."""

    kind: ZoneKind
    s0: float
    s1: float
    bias: tuple[float, float] = (0.0, 0.0)
    inflation: float = 1.0
    density: Optional[float] = None

    def contains(self, s: float) -> bool:
        return self.s0 <= s < self.s1


@dataclass(slots=True)
class NoiseSpec:
    encoder_v: float = 0.1   # m/s
    gyro_w: float = 0.01     # rad/s
    gps_xy: float = 1.5      # m per axis
    lidar: float = 0.1       # m per axis per feature


@dataclass(slots=True)
class SensorGeometry:
    range_m: float = 50.0
    fov_deg: float = 360.0


@dataclass(slots=True)
class Scenario:
    name: str = "scenario"
    seed: int = 0
    feature_seed: int = 424242
    duration_s: Optional[float] = None
    tick_period_s: float = 0.5
    start: tuple[float, float, float] = (0.0, 0.0, 0.0)
    route: list[dict] = field(default_factory=list)
    zones: list[Zone] = field(default_factory=list)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    sensor: SensorGeometry = field(default_factory=SensorGeometry)
    feature_band_m: float = 20.0
    base_density: float = 0.008
    densities: dict[ZoneKind, float] = field(default_factory=lambda: dict(DEFAULT_DENSITIES))

    def __post_init__(self):
        self.zones = _expand_zones(self.zones)

    # -- zone resolution (later declarations win) ------------------------

    def gps_zone_at(self, s: float) -> Optional[Zone]:
        hit = None
        for z in self.zones:
            if z.kind in (ZoneKind.GPS_NOISY, ZoneKind.GPS_DENIED) and z.contains(s):
                hit = z
        return hit

    def density_at(self, s: float) -> float:
        density = self.base_density
        for z in self.zones:
            if z.kind in (ZoneKind.FEATURE_RICH, ZoneKind.FEATURE_SPARSE) and z.contains(s):
                density = z.density if z.density is not None else self.densities[z.kind]
        return density

    # -- (de)serialization ----------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "feature_seed": self.feature_seed,
            "duration_s": self.duration_s,
            "tick_period_s": self.tick_period_s,
            "start": list(self.start),
            "route": self.route,
            "zones": [
                {"kind": z.kind.value, "from_m": z.s0, "to_m": z.s1,
                 "bias": list(z.bias), "inflation": z.inflation,
                 **({"density": z.density} if z.density is not None else {})}
                for z in self.zones
            ],
            "noise": {"encoder_v": self.noise.encoder_v, "gyro_w": self.noise.gyro_w,
                      "gps_xy": self.noise.gps_xy, "lidar": self.noise.lidar},
            "sensor": {"range_m": self.sensor.range_m, "fov_deg": self.sensor.fov_deg},
            "feature_band_m": self.feature_band_m,
            "base_density": self.base_density,
            "densities": {k.value: v for k, v in self.densities.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        noise = NoiseSpec(**data.get("noise", {}))
        sensor = SensorGeometry(**data.get("sensor", {}))
        zones = [
            _carpark_zone(z) if z["kind"] == ZoneKind.CARPARK.value else
            Zone(kind=ZoneKind(z["kind"]), s0=float(z["from_m"]), s1=float(z["to_m"]),
                 bias=tuple(z.get("bias", (0.0, 0.0))),
                 inflation=float(z.get("inflation", 1.0)),
                 density=z.get("density"))
            for z in data.get("zones", ())
        ]
        densities = dict(DEFAULT_DENSITIES)
        for k, v in data.get("densities", {}).items():
            densities[ZoneKind(k)] = float(v)
        return cls(
            name=data.get("name", "scenario"),
            seed=int(data.get("seed", 0)),
            feature_seed=int(data.get("feature_seed", 424242)),
            duration_s=data.get("duration_s"),
            tick_period_s=float(data.get("tick_period_s", 0.5)),
            start=tuple(data.get("start", (0.0, 0.0, 0.0))),
            route=list(data.get("route", ())),
            zones=zones,
            noise=noise,
            sensor=sensor,
            feature_band_m=float(data.get("feature_band_m", 20.0)),
            base_density=float(data.get("base_density", 0.008)),
            densities=densities,
        )

    @classmethod
    def load(cls, path) -> "Scenario":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True, indent=1)
            fh.write("\n")


def _carpark_zone(raw: dict) -> Zone:
    # placeholder zone; expansion happens in _expand_zones
    return Zone(kind=ZoneKind.CARPARK, s0=float(raw["from_m"]), s1=float(raw["to_m"]),
                bias=tuple(raw.get("bias", (12.0, -13.0))),
                inflation=float(raw.get("inflation", 1.0)),
                density=raw.get("density"))


CARPARK_EDGE_M = 25.0


def _expand_zones(zones: list[Zone]) -> list[Zone]:
    """Expand CARPARK composites: noisy+rich edge bands, denied+bare core."""
    out: list[Zone] = []
    for z in zones:
        if z.kind is not ZoneKind.CARPARK:
            out.append(z)
            continue
        edge = CARPARK_EDGE_M
        out.append(Zone(ZoneKind.FEATURE_RICH, z.s0 - edge, z.s0))
        out.append(Zone(ZoneKind.GPS_NOISY, z.s0 - edge, z.s0, bias=z.bias,
                        inflation=z.inflation))
        out.append(Zone(ZoneKind.FEATURE_SPARSE, z.s0, z.s1,
                        density=z.density if z.density is not None else 0.0))
        out.append(Zone(ZoneKind.GPS_DENIED, z.s0, z.s1))
        out.append(Zone(ZoneKind.FEATURE_RICH, z.s1, z.s1 + edge))
        out.append(Zone(ZoneKind.GPS_NOISY, z.s1, z.s1 + edge, bias=z.bias,
                        inflation=z.inflation))
    return out


# --- route compilation -------------------------------------------------------


@dataclass(slots=True)
class _Segment:
    kind: str                 # "line" | "arc" | "hold"
    duration: float           # s
    length: float             # m
    speed: float
    p0: tuple[float, float]
    heading0: float
    # line
    direction: tuple[float, float] = (1.0, 0.0)
    # arc
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 0.0
    turn_sign: float = 1.0


class Route:
    """Compiled route: exact pose as a function of time or arc length."""

    def __init__(self, start: tuple[float, float, float], entries: list[dict]):
        if not entries:
            raise ValueError("route must have at least one entry")
        self.segments: list[_Segment] = []
        x, y, heading = float(start[0]), float(start[1]), float(start[2])
        for entry in entries:
            if "hold" in entry:
                dur = float(entry["hold"])
                if dur <= 0:
                    raise ValueError("hold duration must be > 0")
                self.segments.append(_Segment("hold", dur, 0.0, 0.0, (x, y), heading))
                continue
            speed = float(entry.get("speed", 0.0))
            if speed <= 0:
                raise ValueError(f"moving segment needs speed > 0, got {speed}")
            if "to" in entry:
                tx, ty = float(entry["to"][0]), float(entry["to"][1])
                length = math.hypot(tx - x, ty - y)
                if length <= 0:
                    raise ValueError("zero-length line segment")
                heading = math.atan2(ty - y, tx - x)
                self.segments.append(_Segment(
                    "line", length / speed, length, speed, (x, y), heading,
                    direction=((tx - x) / length, (ty - y) / length)))
                x, y = tx, ty
            elif "arc" in entry:
                arc = entry["arc"]
                radius = float(arc["radius"])
                angle = math.radians(float(arc["angle_deg"]))
                if radius <= 0 or angle == 0.0:
                    raise ValueError("arc needs radius > 0 and a non-zero angle")
                sign = 1.0 if angle > 0 else -1.0
                cx = x - sign * radius * math.sin(heading)
                cy = y + sign * radius * math.cos(heading)
                length = abs(angle) * radius
                self.segments.append(_Segment(
                    "arc", length / speed, length, speed, (x, y), heading,
                    center=(cx, cy), radius=radius, turn_sign=sign))
                phi = abs(angle)
                ux, uy = x - cx, y - cy
                rot = sign * phi
                c, s = math.cos(rot), math.sin(rot)
                x, y = cx + c * ux - s * uy, cy + s * ux + c * uy
                heading = normalize_heading(heading + sign * phi)
            else:
                raise ValueError(f"route entry needs 'to', 'arc' or 'hold': {entry}")
        self.total_duration = sum(seg.duration for seg in self.segments)
        self.total_length = sum(seg.length for seg in self.segments)
        if self.total_length <= 0:
            raise ValueError("route has zero length")
        self._end_pose = (x, y, heading)

    def pose_at_time(self, t: float) -> tuple[float, float, float]:
        if t < 0:
            raise ValueError("time must be >= 0")
        rem = t
        for seg in self.segments:
            if rem <= seg.duration:
                return _segment_pose(seg, rem)
            rem -= seg.duration
        return self._end_pose

    def arclength_at_time(self, t: float) -> float:
        rem = t
        s = 0.0
        for seg in self.segments:
            if rem <= seg.duration:
                return s + seg.speed * rem
            rem -= seg.duration
            s += seg.length
        return s

    def pose_at_arclength(self, s: float) -> tuple[float, float, float]:
        rem = s
        for seg in self.segments:
            if seg.length > 0 and rem <= seg.length:
                return _segment_pose(seg, rem / seg.speed)
            rem -= seg.length
        return self._end_pose


def _segment_pose(seg: _Segment, dt: float) -> tuple[float, float, float]:
    if seg.kind == "hold":
        return (seg.p0[0], seg.p0[1], seg.heading0)
    if seg.kind == "line":
        d = seg.speed * dt
        return (seg.p0[0] + seg.direction[0] * d,
                seg.p0[1] + seg.direction[1] * d,
                seg.heading0)
    phi = seg.turn_sign * (seg.speed / seg.radius) * dt
    ux, uy = seg.p0[0] - seg.center[0], seg.p0[1] - seg.center[1]
    c, s = math.cos(phi), math.sin(phi)
    return (seg.center[0] + c * ux - s * uy,
            seg.center[1] + s * ux + c * uy,
            normalize_heading(seg.heading0 + phi))


# --- ground truth ------------------------------------------------------------


@dataclass(slots=True)
class TruthTrajectory:
    t_us: np.ndarray      # (N,) int64
    poses: np.ndarray     # (N, 3)
    arclength: np.ndarray  # (N,)

    def pose_at(self, t_us: int) -> Pose2D:
        idx = int(np.searchsorted(self.t_us, t_us))
        idx = min(max(idx, 0), len(self.t_us) - 1)
        x, y, h = self.poses[idx]
        return Pose2D(float(x), float(y), float(h))

    def index_of(self, t_us: int) -> int:
        return int(min(np.searchsorted(self.t_us, t_us), len(self.t_us) - 1))


def generate_ground_truth(scenario: Scenario) -> TruthTrajectory:
    """Sample the route traversal at 100 Hz; C0 positions, heading tangent."""
    route = Route(scenario.start, scenario.route)
    duration = scenario.duration_s if scenario.duration_s is not None else route.total_duration
    n = int(math.floor(duration * 100.0)) + 1
    t_us = np.arange(n, dtype=np.int64) * TRUTH_STEP_US
    poses = np.empty((n, 3))
    arcs = np.empty(n)
    for i in range(n):
        t = t_us[i] / 1e6
        poses[i] = route.pose_at_time(t)
        arcs[i] = route.arclength_at_time(t)
    return TruthTrajectory(t_us=t_us, poses=poses, arclength=arcs)


# --- map features ------------------------------------------------------------


def generate_features(scenario: Scenario) -> list[MapFeature]:
    """Scatter features in a band around the route, per-zone density."""
    route = Route(scenario.start, scenario.route)
    rng = np.random.Generator(np.random.PCG64(scenario.feature_seed))
    half = scenario.feature_band_m
    # density breakpoints: zone boundaries clipped to the route
    cuts = {0.0, route.total_length}
    for z in scenario.zones:
        for s in (z.s0, z.s1):
            if 0.0 < s < route.total_length:
                cuts.add(s)
    cuts = sorted(cuts)
    features: list[MapFeature] = []
    fid = 0
    for s0, s1 in zip(cuts[:-1], cuts[1:]):
        density = scenario.density_at(0.5 * (s0 + s1))
        count = int(round(density * (s1 - s0) * 2.0 * half))
        if count <= 0:
            continue
        ss = rng.uniform(s0, s1, size=count)
        laterals = rng.uniform(-half, half, size=count)
        kinds = rng.integers(0, 2, size=count)
        for s, u, k in zip(ss, laterals, kinds):
            x, y, h = route.pose_at_arclength(float(s))
            fx = x - math.sin(h) * u
            fy = y + math.cos(h) * u
            features.append(MapFeature(
                feature_id=fid,
                kind=FeatureKind.POLE if k == 0 else FeatureKind.CORNER,
                x=float(fx), y=float(fy)))
            fid += 1
    return features


# --- measurement synthesis ---------------------------------------------------


def synthesize_measurements(scenario: Scenario, truth: TruthTrajectory,
                            features: list[MapFeature]) -> list[Measurement]:
    """Noisy streams at nominal rates, merged in (timestamp, stream) order."""
    rng = np.random.Generator(np.random.PCG64(scenario.seed))
    noise = scenario.noise
    n = len(truth.t_us)
    end_us = int(truth.t_us[-1])
    poses = truth.poses

    # forward-difference true rates on the 100 Hz grid; the last sample holds 0
    dt = TRUTH_STEP_US / 1e6
    dp = np.diff(poses[:, :2], axis=0)
    v_true = np.concatenate([np.hypot(dp[:, 0], dp[:, 1]) / dt, [0.0]])
    dh = np.diff(poses[:, 2])
    dh = np.arctan2(np.sin(dh), np.cos(dh))
    w_true = np.concatenate([dh / dt, [0.0]])

    out: list[Measurement] = []

    enc_idx = np.arange(0, n, ENCODER_PERIOD_US // TRUTH_STEP_US)
    enc_noise = rng.normal(0.0, noise.encoder_v, size=len(enc_idx))
    for i, eps in zip(enc_idx, enc_noise):
        out.append(Measurement(int(truth.t_us[i]),
                               EncoderSpeed(float(v_true[i] + eps), noise.encoder_v)))

    gyro_idx = np.arange(0, n, GYRO_PERIOD_US // TRUTH_STEP_US)
    gyro_noise = rng.normal(0.0, noise.gyro_w, size=len(gyro_idx))
    for i, eps in zip(gyro_idx, gyro_noise):
        out.append(Measurement(int(truth.t_us[i]),
                               GyroYawRate(float(w_true[i] + eps), noise.gyro_w)))

    gps_idx = np.arange(0, n, GPS_PERIOD_US // TRUTH_STEP_US)
    gps_noise = rng.normal(0.0, 1.0, size=(len(gps_idx), 2))
    var = noise.gps_xy ** 2
    for i, eps in zip(gps_idx, gps_noise):
        t_us = int(truth.t_us[i])
        zone = scenario.gps_zone_at(float(truth.arclength[i]))
        if zone is not None and zone.kind is ZoneKind.GPS_DENIED:
            out.append(Measurement(t_us, GpsFix.no_fix()))
            continue
        sigma = noise.gps_xy
        bias = (0.0, 0.0)
        if zone is not None and zone.kind is ZoneKind.GPS_NOISY:
            sigma = noise.gps_xy * zone.inflation
            bias = zone.bias
        x = float(poses[i, 0] + bias[0] + eps[0] * sigma)
        y = float(poses[i, 1] + bias[1] + eps[1] * sigma)
        out.append(Measurement(t_us, GpsFix(x, y, GpsStatus.FIX,
                                            cov_xx=var, cov_xy=0.0, cov_yy=var)))

    feat_xy = np.array([[f.x, f.y] for f in features]) if features else np.empty((0, 2))
    half_fov = math.radians(scenario.sensor.fov_deg) / 2.0
    rng_m = scenario.sensor.range_m
    lidar_idx = np.arange(0, n, LIDAR_PERIOD_US // TRUTH_STEP_US)
    for i in lidar_idx:
        t_us = int(truth.t_us[i])
        px, py, heading = poses[i]
        if len(features) == 0:
            out.append(Measurement(t_us, LidarScan(())))
            continue
        dx = feat_xy[:, 0] - px
        dy = feat_xy[:, 1] - py
        dist = np.hypot(dx, dy)
        visible = dist <= rng_m
        if scenario.sensor.fov_deg < 360.0:
            bearing = np.arctan2(dy, dx) - heading
            bearing = np.arctan2(np.sin(bearing), np.cos(bearing))
            visible &= np.abs(bearing) <= half_fov
        idxs = np.nonzero(visible)[0]
        eps = rng.normal(0.0, noise.lidar, size=(len(idxs), 2))
        c, s = math.cos(heading), math.sin(heading)
        obs = []
        for j, (fi, e) in enumerate(zip(idxs, eps)):
            lx = c * dx[fi] + s * dy[fi] + e[0]
            ly = -s * dx[fi] + c * dy[fi] + e[1]
            if math.hypot(lx, ly) > rng_m:  # keep the range invariant after noise
                continue
            obs.append(LidarFeatureObs(kind=features[fi].kind,
                                       x=float(lx), y=float(ly), sigma=noise.lidar))
        out.append(Measurement(t_us, LidarScan(tuple(obs))))

    out.sort(key=Measurement.sort_key)
    return out


# --- record / replay ---------------------------------------------------------


def measurement_to_dict(m: Measurement) -> dict:
    p = m.payload
    if isinstance(p, EncoderSpeed):
        return {"t_us": m.t_us, "stream": "encoder", "v": p.v, "sigma": p.sigma}
    if isinstance(p, GyroYawRate):
        return {"t_us": m.t_us, "stream": "gyro", "omega": p.omega, "sigma": p.sigma}
    if isinstance(p, GpsFix):
        if p.status is GpsStatus.NO_FIX:
            return {"t_us": m.t_us, "stream": "gps", "status": "NO_FIX"}
        return {"t_us": m.t_us, "stream": "gps", "status": "FIX",
                "x": p.x, "y": p.y, "cov": [p.cov_xx, p.cov_xy, p.cov_yy]}
    if isinstance(p, LidarScan):
        return {"t_us": m.t_us, "stream": "lidar",
                "features": [[f.kind.value, f.x, f.y, f.sigma] for f in p.features]}
    raise TypeError(f"unknown payload {p!r}")


def measurement_from_dict(row: dict) -> Measurement:
    stream = row["stream"]
    t_us = int(row["t_us"])
    if stream == "encoder":
        return Measurement(t_us, EncoderSpeed(row["v"], row["sigma"]))
    if stream == "gyro":
        return Measurement(t_us, GyroYawRate(row["omega"], row["sigma"]))
    if stream == "gps":
        if row["status"] == "NO_FIX":
            return Measurement(t_us, GpsFix.no_fix())
        cov = row["cov"]
        return Measurement(t_us, GpsFix(row["x"], row["y"], GpsStatus.FIX,
                                        cov_xx=cov[0], cov_xy=cov[1], cov_yy=cov[2]))
    if stream == "lidar":
        feats = tuple(LidarFeatureObs(kind=FeatureKind(f[0]), x=f[1], y=f[2], sigma=f[3])
                      for f in row["features"])
        return Measurement(t_us, LidarScan(feats))
    raise ValueError(f"unknown stream {stream!r}")


def save_measurements(path, measurements: list[Measurement]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in measurements:
            fh.write(json.dumps(measurement_to_dict(m), sort_keys=True) + "\n")


def load_measurements(path) -> list[Measurement]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(measurement_from_dict(json.loads(line)))
    return out


def save_truth(path, truth: TruthTrajectory) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t, pose in zip(truth.t_us, truth.poses):
            fh.write(json.dumps({"t_us": int(t), "x": float(pose[0]),
                                 "y": float(pose[1]), "heading": float(pose[2])},
                                sort_keys=True) + "\n")


def load_truth(path) -> TruthTrajectory:
    ts, poses = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            ts.append(row["t_us"])
            poses.append([row["x"], row["y"], row["heading"]])
    arr = np.array(poses)
    t_us = np.array(ts, dtype=np.int64)
    # arc length only matters for synthesis; reconstruct from positions
    seg = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(arr[:, :2], axis=0).T))])
    return TruthTrajectory(t_us=t_us, poses=arr, arclength=seg)
