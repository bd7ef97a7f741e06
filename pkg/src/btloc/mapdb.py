"""Geographically registered map store.

Three layers on a common 10 m grid: surveyed point features for scan matching,
a per-cell GPS usability model, and per-cell historical headings from past
lidar-localised traversals.  The sensor-model layers are built offline from
recorded update statistics and are read-only during a run.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

from .estimation import Sensor, UpdateOutcome, UpdateStats
from .types import FeatureKind, MapFeature

CELL_SIZE_M = 10.0


class GpsQuality(Enum):
    USABLE = "USABLE"
    NOISY = "NOISY"
    UNAVAILABLE = "UNAVAILABLE"


# acceptance-ratio breakpoints for the three quality classes
USABLE_MIN_RATIO = 0.8
NOISY_MIN_RATIO = 0.1


def cell_of(x: float, y: float) -> tuple[int, int]:
    return (math.floor(x / CELL_SIZE_M), math.floor(y / CELL_SIZE_M))


@dataclass(slots=True)
class LocationModelCell:
    cx: int
    cy: int
    gps_quality: Optional[GpsQuality] = None
    gps_accepted: int = 0
    gps_rejected: int = 0
    gps_no_fix: int = 0
    headings: list[float] = field(default_factory=list)
    heading_positions: list[tuple[float, float]] = field(default_factory=list)

    @property
    def sample_count(self) -> int:
        return self.gps_accepted + self.gps_rejected + self.gps_no_fix + len(self.headings)


class FeatureLayer:
    """Point features behind a uniform-grid spatial index."""

    def __init__(self, features: Iterable[MapFeature] = ()):
        self._features: dict[int, MapFeature] = {}
        self._grid: dict[tuple[int, int], list[int]] = defaultdict(list)
        for f in features:
            self.add(f)

    def add(self, feature: MapFeature) -> None:
        if feature.feature_id in self._features:
            raise ValueError(f"duplicate feature id {feature.feature_id}")
        self._features[feature.feature_id] = feature
        self._grid[cell_of(feature.x, feature.y)].append(feature.feature_id)

    def __len__(self) -> int:
        return len(self._features)

    def all_features(self) -> list[MapFeature]:
        return [self._features[k] for k in sorted(self._features)]

    def query_radius(self, center: tuple[float, float], radius: float) -> list[MapFeature]:
        """All features within the closed Euclidean ball of ``radius``."""
        if radius <= 0.0:
            raise ValueError("radius must be > 0")
        cx, cy = center
        r2 = radius * radius
        c_lo = cell_of(cx - radius, cy - radius)
        c_hi = cell_of(cx + radius, cy + radius)
        out = []
        for ix in range(c_lo[0], c_hi[0] + 1):
            for iy in range(c_lo[1], c_hi[1] + 1):
                for fid in self._grid.get((ix, iy), ()):
                    f = self._features[fid]
                    dx, dy = f.x - cx, f.y - cy
                    if dx * dx + dy * dy <= r2:
                        out.append(f)
        return out


class LocationModel:
    """Per-cell GPS usability plus historical headings."""

    def __init__(self):
        self.cells: dict[tuple[int, int], LocationModelCell] = {}

    def _cell(self, key: tuple[int, int]) -> LocationModelCell:
        cell = self.cells.get(key)
        if cell is None:
            cell = LocationModelCell(cx=key[0], cy=key[1])
            self.cells[key] = cell
        return cell

    def query_gps_model(self, position: tuple[float, float]) -> GpsQuality:
        """Quality of the containing cell; unvisited cells default to USABLE."""
        cell = self.cells.get(cell_of(*position))
        if cell is None or cell.gps_quality is None:
            return GpsQuality.USABLE
        return cell.gps_quality

    def query_lidar_history(self, position: tuple[float, float],
                            box_m: float = 10.0) -> list[float]:
        """Historical headings whose pose lies in the axis-aligned box."""
        x, y = position
        half = box_m / 2.0
        c_lo = cell_of(x - half, y - half)
        c_hi = cell_of(x + half, y + half)
        out: list[float] = []
        for ix in range(c_lo[0], c_hi[0] + 1):
            for iy in range(c_lo[1], c_hi[1] + 1):
                cell = self.cells.get((ix, iy))
                if cell is None:
                    continue
                for h, (px, py) in zip(cell.headings, cell.heading_positions):
                    if abs(px - x) <= half and abs(py - y) <= half:
                        out.append(h)
        return out

    def ingest(self, stats: Iterable[UpdateStats]) -> None:
        """Accumulate raw counts from recorded update statistics."""
        for row in stats:
            if row.pose is None:
                continue
            key = cell_of(row.pose[0], row.pose[1])
            if row.sensor is Sensor.GPS:
                cell = self._cell(key)
                if row.outcome is UpdateOutcome.ACCEPTED:
                    cell.gps_accepted += 1
                elif row.outcome is UpdateOutcome.REJECTED:
                    cell.gps_rejected += 1
                elif row.outcome is UpdateOutcome.NO_FIX:
                    cell.gps_no_fix += 1
            elif row.sensor is Sensor.LIDAR and row.outcome is UpdateOutcome.ACCEPTED:
                cell = self._cell(key)
                cell.headings.append(row.pose[2])
                cell.heading_positions.append((row.pose[0], row.pose[1]))

    def finalize(self) -> None:
        """Classify every touched cell from its accumulated counts."""
        for cell in self.cells.values():
            decided = cell.gps_accepted + cell.gps_rejected
            if decided == 0:
                cell.gps_quality = (GpsQuality.UNAVAILABLE if cell.gps_no_fix > 0 else None)
                continue
            ratio = cell.gps_accepted / decided
            if ratio >= USABLE_MIN_RATIO:
                cell.gps_quality = GpsQuality.USABLE
            elif ratio >= NOISY_MIN_RATIO:
                cell.gps_quality = GpsQuality.NOISY
            else:
                cell.gps_quality = GpsQuality.UNAVAILABLE


def build_location_model(stats_logs: Sequence[Iterable[UpdateStats]]) -> LocationModel:
    """Build the sensor-model layers from one or more recorded runs.

    Order independent across log concatenation: only per-cell counts matter.
    """
    model = LocationModel()
    for log in stats_logs:
        model.ingest(log)
    model.finalize()
    return model


class MapDb:
    """Feature layer + location model, persisted as one flat JSON file."""

    def __init__(self, features: Optional[FeatureLayer] = None,
                 model: Optional[LocationModel] = None):
        self.features = features if features is not None else FeatureLayer()
        self.model = model if model is not None else LocationModel()

    def query_features(self, center: tuple[float, float], radius: float) -> list[MapFeature]:
        return self.features.query_radius(center, radius)

    def query_gps_model(self, position: tuple[float, float]) -> GpsQuality:
        return self.model.query_gps_model(position)

    def query_lidar_history(self, position: tuple[float, float]) -> list[float]:
        return self.model.query_lidar_history(position)

    def to_dict(self) -> dict:
        cells = []
        for key in sorted(self.model.cells):
            c = self.model.cells[key]
            cells.append({
                "cx": c.cx, "cy": c.cy,
                "gps_quality": c.gps_quality.value if c.gps_quality else None,
                "gps_counts": [c.gps_accepted, c.gps_rejected, c.gps_no_fix],
                "headings": list(c.headings),
                "heading_positions": [list(p) for p in c.heading_positions],
                "samples": c.sample_count,
            })
        return {
            "features": [
                {"id": f.feature_id, "kind": f.kind.value, "x": f.x, "y": f.y}
                for f in self.features.all_features()
            ],
            "cells": cells,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MapDb":
        layer = FeatureLayer(
            MapFeature(feature_id=row["id"], kind=FeatureKind(row["kind"]),
                       x=row["x"], y=row["y"])
            for row in data.get("features", ())
        )
        model = LocationModel()
        for row in data.get("cells", ()):
            cell = LocationModelCell(cx=row["cx"], cy=row["cy"])
            if row.get("gps_quality"):
                cell.gps_quality = GpsQuality(row["gps_quality"])
            counts = row.get("gps_counts", [0, 0, 0])
            cell.gps_accepted, cell.gps_rejected, cell.gps_no_fix = counts
            cell.headings = list(row.get("headings", ()))
            cell.heading_positions = [tuple(p) for p in row.get("heading_positions", ())]
            model.cells[(cell.cx, cell.cy)] = cell
        return cls(layer, model)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "MapDb":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
