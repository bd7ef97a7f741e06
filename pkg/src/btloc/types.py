"""Shared planar geometry, time and measurement containers.

Everything downstream (filters, pipeline, behavior tree, simulator) trades in
these types.  Poses are planar (x, y, heading); simulation time is integer
microseconds so that replays are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Union

import numpy as np

TWO_PI = 2.0 * math.pi

US_PER_S = 1_000_000


def s_to_us(seconds: float) -> int:
    """Convert seconds to integer microseconds (round to nearest)."""
    return int(round(seconds * US_PER_S))


def us_to_s(micros: int) -> float:
    return micros / US_PER_S


def normalize_heading(angle: float) -> float:
    """Wrap an angle to (-pi, pi].

    Raises ValueError on non-finite input.
    """
    if not math.isfinite(angle):
        raise ValueError(f"heading must be finite, got {angle!r}")
    a = math.fmod(angle, TWO_PI)
    if a <= -math.pi:
        a += TWO_PI
    elif a > math.pi:
        a -= TWO_PI
    return a


@dataclass(frozen=True, slots=True)
class Pose2D:
    """Planar vehicle pose in the map frame.

    x, y in meters, heading in radians wrapped to (-pi, pi].
    """

    x: float
    y: float
    heading: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError("pose position must be finite")
        object.__setattr__(self, "heading", normalize_heading(self.heading))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading], dtype=float)

    def distance_to(self, other: "Pose2D") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


def transform_to_map(pose: Pose2D, local: tuple[float, float]) -> tuple[float, float]:
    """Map a vehicle-frame point into the map frame: R(heading) @ local + t."""
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    lx, ly = local
    return (c * lx - s * ly + pose.x, s * lx + c * ly + pose.y)


def transform_to_vehicle(pose: Pose2D, point: tuple[float, float]) -> tuple[float, float]:
    """Inverse of :func:`transform_to_map`."""
    c, s = math.cos(pose.heading), math.sin(pose.heading)
    dx, dy = point[0] - pose.x, point[1] - pose.y
    return (c * dx + s * dy, -s * dx + c * dy)


# --- covariance helpers -----------------------------------------------------

def symmetrize(cov: np.ndarray) -> np.ndarray:
    """Force exact symmetry; call after every filter step."""
    return 0.5 * (cov + cov.T)


def is_symmetric(cov: np.ndarray, rtol: float = 1e-9) -> bool:
    scale = max(1.0, float(np.max(np.abs(cov))))
    return bool(np.max(np.abs(cov - cov.T)) <= rtol * scale)


def min_eigenvalue(cov: np.ndarray) -> float:
    return float(np.min(np.linalg.eigvalsh(symmetrize(cov))))


def check_covariance(cov: np.ndarray, eig_tol: float = -1e-9) -> None:
    """Raise if ``cov`` is not a valid 3x3 symmetric PSD matrix."""
    if cov.shape != (3, 3):
        raise ValueError(f"covariance must be 3x3, got {cov.shape}")
    if not is_symmetric(cov):
        raise ValueError("covariance is not symmetric")
    ev = min_eigenvalue(cov)
    if ev < eig_tol:
        raise ValueError(f"covariance not PSD (min eigenvalue {ev:.3e})")


# --- measurements -----------------------------------------------------------

class GpsStatus(Enum):
    FIX = "FIX"
    NO_FIX = "NO_FIX"


class FeatureKind(Enum):
    POLE = "POLE"
    CORNER = "CORNER"


@dataclass(frozen=True, slots=True)
class EncoderSpeed:
    """Wheel-encoder forward speed, m/s."""

    v: float
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError("encoder sigma must be > 0")


@dataclass(frozen=True, slots=True)
class GyroYawRate:
    """Gyro yaw rate, rad/s."""

    omega: float
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError("gyro sigma must be > 0")


@dataclass(frozen=True, slots=True)
class GpsFix:
    """GPS position fix with reported 2x2 covariance.

    With status NO_FIX the position fields carry NaN and must not be read.
    """

    x: float
    y: float
    status: GpsStatus
    cov_xx: float = 1.0
    cov_xy: float = 0.0
    cov_yy: float = 1.0

    @classmethod
    def no_fix(cls) -> "GpsFix":
        return cls(float("nan"), float("nan"), GpsStatus.NO_FIX)

    def position(self) -> np.ndarray:
        if self.status is GpsStatus.NO_FIX:
            raise ValueError("NO_FIX carries no usable position")
        return np.array([self.x, self.y], dtype=float)

    def cov(self) -> np.ndarray:
        return np.array([[self.cov_xx, self.cov_xy], [self.cov_xy, self.cov_yy]], dtype=float)


@dataclass(frozen=True, slots=True)
class LidarFeatureObs:
    """One extracted point feature in the vehicle frame (isotropic sigma)."""

    kind: FeatureKind
    x: float
    y: float
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ValueError("feature sigma must be > 0")


@dataclass(frozen=True, slots=True)
class LidarScan:
    features: tuple[LidarFeatureObs, ...]


Payload = Union[EncoderSpeed, GyroYawRate, GpsFix, LidarScan]

_STREAM_OF = {
    GyroYawRate: "gyro",
    EncoderSpeed: "encoder",
    LidarScan: "lidar",
    GpsFix: "gps",
}

# at equal timestamps, motion inputs are delivered before observations
STREAM_ORDER = {"gyro": 0, "encoder": 1, "lidar": 2, "gps": 3}


@dataclass(frozen=True, slots=True)
class Measurement:
    """A timestamped sensor payload (time in integer microseconds)."""

    t_us: int
    payload: Payload

    def __post_init__(self):
        if self.t_us < 0:
            raise ValueError("timestamps are non-negative")

    @property
    def stream(self) -> str:
        return _STREAM_OF[type(self.payload)]

    def sort_key(self) -> tuple[int, int]:
        return (self.t_us, STREAM_ORDER[self.stream])


@dataclass(frozen=True, slots=True)
class MapFeature:
    """Surveyed point feature in the map frame."""

    feature_id: int
    kind: FeatureKind
    x: float
    y: float
