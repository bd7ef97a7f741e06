"""The supervision tree: sensor subtrees, fallback ladder, resets, context gating.

A single-sensor subtree runs initialise / localise / fail in sequence:

* initialise blocks (or fails, under a multi-sensor selector) until the sensor
  front end is ready, then connects its pipeline route;
* localise is a selector over progressively more permissive rejection bounds
  (2 sigma, 3 sigma, all) — each branch sets its bound and then reports
  RUNNING while that bound keeps producing acceptable updates;
* fail disconnects the route, clears the subtree's blackboard state and
  returns FAILURE so a lower-priority sibling can take over.

Falling one rung needs ``reject_streak`` consecutive rejections recorded at
the current bound; climbing back needs ``accept_streak`` consecutive updates
whose Mahalanobis distance already satisfies the stricter bound.  A subtree
with no accepted update for ``stale_fail_s`` (since its route connected)
fails outright.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence as Seq

import numpy as np

from . import estimation as est
from .bt import Action, BTNode, Condition, NodeStatus, Parallel, Selector, Sequence
from .estimation import (
    FilterHealth,
    FilterState,
    GateBound,
    GATE_LADDER,
    Sensor,
    UpdateOutcome,
    UpdateStats,
)
from .mapdb import GpsQuality
from .types import Measurement, GpsFix, GpsStatus, Pose2D, normalize_heading

_log = logging.getLogger(__name__)


class TransitionKind(Enum):
    SENSOR_SWITCH = "SENSOR_SWITCH"
    LOSS_RECOVERY = "LOSS_RECOVERY"


@dataclass(frozen=True, slots=True)
class TransitionEvent:
    t_us: int
    kind: TransitionKind
    from_mode: str
    to_mode: str
    jump_distance: float

    def __post_init__(self):
        if self.jump_distance < 0:
            raise ValueError("jump distance must be >= 0")
        if self.kind is TransitionKind.SENSOR_SWITCH and self.from_mode == self.to_mode:
            raise ValueError("sensor switch needs distinct modes")

    def to_dict(self) -> dict:
        return {"t_us": self.t_us, "kind": self.kind.value,
                "from_mode": self.from_mode, "to_mode": self.to_mode,
                "jump_m": self.jump_distance}


@dataclass(slots=True)
class SensorSubtreeSpec:
    sensor: Sensor
    target_filter: str = "main"
    priority_rank: int = 0
    ladder: tuple[GateBound, ...] = GATE_LADDER
    # True: the readiness check returns RUNNING while unmet (standalone use,
    # e.g. the backup filter under the root parallel); False: it returns
    # FAILURE so a multi-sensor selector can fall through to lower priorities.
    init_block: bool = False

    def __post_init__(self):
        thresholds = [b.threshold for b in self.ladder]
        if thresholds != sorted(thresholds) or len(set(thresholds)) != len(thresholds):
            raise ValueError("gate ladder must be strictly increasing in permissiveness")


@dataclass(slots=True)
class BehaviorConfig:
    reject_streak: int = 3          # consecutive rejections at a bound to fall one rung
    accept_streak: int = 5          # consecutive in-bound updates to climb back
    stale_fail_s: float = 5.0       # no accepted update for this long -> subtree fails
    readiness_max_age_s: float = 1.0   # lidar front-end freshness for initialisation
    gps_fix_max_age_s: float = 2.5     # GPS fix freshness for initialisation
    hysteresis_ticks: int = 3          # context gate insert/prune debounce
    attribution_window_s: float = 1.5  # update recency defining the per-tick mode
    cross_heading_diff_deg: float = 10.0
    reset_cov_diag: tuple[float, float, float] = (4.0, 4.0, math.radians(10.0) ** 2)


_BOUND_LABEL = {GateBound.TWO_SIGMA: "2sigma", GateBound.THREE_SIGMA: "3sigma",
                GateBound.ALL: "all"}


def ladder_branch_status(bound: GateBound, active: GateBound,
                         window: Seq[UpdateStats], now_us: int,
                         connected_since_us: int, health: FilterHealth,
                         cfg: BehaviorConfig) -> NodeStatus:
    """Viability of one rejection-bound branch, from the snapshot only."""
    if health is FilterHealth.LOST:
        return NodeStatus.FAILURE
    decided = [s for s in window
               if s.outcome in (UpdateOutcome.ACCEPTED, UpdateOutcome.REJECTED)]
    last_accept = next((s.t_us for s in reversed(decided)
                        if s.outcome is UpdateOutcome.ACCEPTED), None)
    anchor = connected_since_us if last_accept is None else max(last_accept, connected_since_us)
    if now_us - anchor > cfg.stale_fail_s * 1e6:
        return NodeStatus.FAILURE
    if bound.threshold < active.threshold:
        # stricter than the active bound: claim only on proven recovery
        tail = decided[-cfg.accept_streak:]
        good = (len(tail) >= cfg.accept_streak
                and all(s.mahalanobis is not None and s.mahalanobis <= bound.threshold
                        for s in tail))
        return NodeStatus.RUNNING if good else NodeStatus.FAILURE
    tail = decided[-cfg.reject_streak:]
    streak = (len(tail) >= cfg.reject_streak
              and all(s.outcome is UpdateOutcome.REJECTED and s.bound is bound
                      for s in tail))
    return NodeStatus.FAILURE if streak else NodeStatus.RUNNING


def cross_filter_reset_check(main_state: FilterState, backup_state: FilterState,
                             main_health: FilterHealth, backup_health: FilterHealth,
                             max_heading_diff_rad: float) -> bool:
    """Reset main from backup iff headings disagree and backup is strictly healthier."""
    if not (main_state.initialized and backup_state.initialized):
        return False
    diff = abs(normalize_heading(main_state.pose.heading - backup_state.pose.heading))
    return diff > max_heading_diff_rad and backup_health > main_health


@dataclass(slots=True)
class SubtreeSlot:
    """Bookkeeping for a prunable / re-insertable GPS subtree."""

    factory: Callable[[], BTNode]
    node: Optional[BTNode] = None
    parent_id: Optional[int] = None
    index: int = 0
    present: bool = False


# ---------------------------------------------------------------------------
# subtree builders; ``rt`` is the run-time context (see runner.Runtime)
# ---------------------------------------------------------------------------


def build_single_sensor_subtree(spec: SensorSubtreeSpec, rt) -> BTNode:
    fid = spec.target_filter
    sensor = spec.sensor
    prefix = f"{fid}-{sensor.value.lower()}"
    kernel = rt.kernels[fid]

    def now_us(bb) -> int:
        return int(bb.get("clock_us", 0))

    def release(bb=None) -> None:
        rt.router.release(fid, sensor)

    def readiness(bb) -> NodeStatus:
        if rt.router.current(fid) == sensor:
            return NodeStatus.SUCCESS  # already connected and localising
        ready = False
        if sensor is Sensor.GPS:
            meas = bb.get("meas/gps")
            quality = bb.get("gps_quality", GpsQuality.USABLE)
            if (isinstance(meas, Measurement) and isinstance(meas.payload, GpsFix)
                    and meas.payload.status is GpsStatus.FIX
                    and now_us(bb) - meas.t_us <= rt.behavior.gps_fix_max_age_s * 1e6
                    and quality in (GpsQuality.USABLE, GpsQuality.NOISY)):
                ready = True
        else:
            obs = bb.get("frontend/lidar")
            if (obs is not None and obs.result.converged
                    and now_us(bb) - obs.t_us <= rt.behavior.readiness_max_age_s * 1e6):
                ready = True
        if ready:
            return NodeStatus.SUCCESS
        return NodeStatus.RUNNING if spec.init_block else NodeStatus.FAILURE

    def connect(bb) -> NodeStatus:
        rt.router.claim(fid, sensor, now_us(bb))
        return NodeStatus.SUCCESS

    def teardown() -> None:
        rt.router.release(fid, sensor)
        rt.publisher.clear_window(fid, sensor)

    def make_set_bound(bound: GateBound):
        def set_bound(bb) -> NodeStatus:
            if kernel.bound is not bound:
                kernel.set_bound(bound)
                bb.post(f"bound/{fid}/{sensor.value}", bound)
            return NodeStatus.SUCCESS
        return set_bound

    def make_localising(bound: GateBound):
        def localising(bb) -> NodeStatus:
            window = bb.get(f"stats/{fid}/{sensor.value}", ())
            active = bb.get(f"bound/{fid}/{sensor.value}", GateBound.TWO_SIGMA)
            health = bb.get(f"health/{fid}", FilterHealth.DEGRADED)
            since = rt.router.since(fid, sensor)
            if since is None:
                since = now_us(bb)
            return ladder_branch_status(bound, active, window, now_us(bb),
                                        since, health, rt.behavior)
        return localising

    def disconnect(bb) -> NodeStatus:
        release()
        rt.publisher.clear_window(fid, sensor)
        kernel.set_bound(GateBound.TWO_SIGMA)
        bb.post(f"bound/{fid}/{sensor.value}", GateBound.TWO_SIGMA)
        return NodeStatus.SUCCESS

    init = Sequence(f"{prefix}-initialise", [
        Condition(f"{prefix}-front-end-ready", readiness, on_halt=release),
        Action(f"{prefix}-connect", connect, on_prune=teardown),
    ])
    branches = []
    for bound in spec.ladder:
        label = _BOUND_LABEL[bound]
        branches.append(Sequence(f"{prefix}-{label}", [
            Action(f"{prefix}-use-{label}", make_set_bound(bound)),
            Condition(f"{prefix}-localising-{label}", make_localising(bound),
                      on_halt=release),
        ]))
    localise = Selector(f"{prefix}-localise", branches)
    fail = Sequence(f"{prefix}-fail", [
        Action(f"{prefix}-disconnect", disconnect),
        Condition(f"{prefix}-failed", lambda bb: NodeStatus.FAILURE),
    ])
    return Sequence(f"{prefix}-localisation", [
        init,
        Selector(f"{prefix}-localise-or-fail", [localise, fail]),
    ])


def make_dr_leaf(rt) -> BTNode:
    """Lowest-priority fallback: dead reckoning is always available."""
    return Condition("dead-reckoning", lambda bb: NodeStatus.RUNNING)


def build_sensor_selector(specs: Seq[SensorSubtreeSpec], rt,
                          name: str = "sensor-selector") -> BTNode:
    if not specs:
        raise ValueError("selector needs at least one sensor spec")
    ordered = sorted(specs, key=lambda s: s.priority_rank)
    children: list[BTNode] = [build_single_sensor_subtree(s, rt) for s in ordered]
    children.append(make_dr_leaf(rt))
    return Selector(name, children)


def make_reset_monitor(rt) -> BTNode:
    """Highest-priority main-selector child: manual and cross-filter resets."""

    def monitor(bb) -> NodeStatus:
        now = int(bb.get("clock_us", 0))
        cmd = bb.consume("control/manual_reset")
        if cmd is not None:
            if cmd[0] == "reset":
                target = Pose2D(cmd[1], cmd[2], cmd[3])
                rt.reset_main(target, np.diag(rt.behavior.reset_cov_diag), now)
            else:  # reinit: adopt the backup hypothesis
                rt.reset_main_from_backup(now)
            return NodeStatus.SUCCESS
        main = rt.kernels["main"].state
        backup = rt.kernels["backup"].state if "backup" in rt.kernels else None
        if backup is not None and cross_filter_reset_check(
                main, backup,
                bb.get("health/main", FilterHealth.DEGRADED),
                bb.get("health/backup", FilterHealth.DEGRADED),
                math.radians(rt.behavior.cross_heading_diff_deg)):
            rt.reset_main_from_backup(now)
            return NodeStatus.SUCCESS
        return NodeStatus.FAILURE

    return Condition("reset-monitor", monitor)


def make_topic_listeners(rt) -> BTNode:
    """First parallel child: derive the per-tick context topics."""

    def listeners(bb) -> NodeStatus:
        now = int(bb.get("clock_us", 0))
        for fid, kernel in rt.kernels.items():
            health = est.health_assess(kernel.state, now, rt.tuning.health)
            kernel.state.health = health
            bb.set_derived(f"health/{fid}", health)
        best = rt.best_position()
        bb.set_derived("pos/best", best)
        quality = (rt.mapdb.query_gps_model(best) if best is not None
                   else GpsQuality.USABLE)
        bb.set_derived("gps_quality", quality)
        return NodeStatus.SUCCESS

    return Condition("topic-listeners", listeners)


def make_gps_context_gate(rt) -> BTNode:
    """Prune / re-insert the GPS subtrees from the location model, debounced."""

    streaks = {"unavailable": 0, "usable": 0}

    def gate(bb) -> NodeStatus:
        quality = bb.get("gps_quality", GpsQuality.USABLE)
        if quality is GpsQuality.UNAVAILABLE:
            streaks["unavailable"] += 1
            streaks["usable"] = 0
        else:
            streaks["usable"] += 1
            streaks["unavailable"] = 0
        if streaks["unavailable"] >= rt.behavior.hysteresis_ticks:
            for slot in rt.gps_slots.values():
                if slot.present:
                    parent = slot.node.parent
                    slot.parent_id = parent.node_id
                    slot.index = parent.children.index(slot.node)
                    rt.tree.prune_subtree(slot.node.node_id)
                    slot.present = False
                    slot.node = None
        elif streaks["usable"] >= rt.behavior.hysteresis_ticks:
            for slot in rt.gps_slots.values():
                if not slot.present and slot.parent_id is not None:
                    node = slot.factory()
                    rt.tree.insert_subtree(slot.parent_id, slot.index, node)
                    slot.node = node
                    slot.present = True
        return NodeStatus.SUCCESS

    return Action("gps-context-gate", gate)


def build_experiment_tree(rt, main_sensors: Seq[Sensor] = (Sensor.LIDAR, Sensor.GPS),
                          include_backup: bool = True) -> BTNode:
    """Root parallel: information gathering, backup GPS hypothesis, main selector."""
    if rt.mapdb is None:
        raise ValueError("experiment tree needs a loaded map database")
    listeners = Sequence("information-gathering", [
        make_topic_listeners(rt),
        make_gps_context_gate(rt),
    ])
    children: list[BTNode] = [listeners]

    if include_backup:
        backup_spec = SensorSubtreeSpec(Sensor.GPS, target_filter="backup",
                                        init_block=True)
        backup = build_single_sensor_subtree(backup_spec, rt)
        children.append(backup)

    main_children: list[BTNode] = [make_reset_monitor(rt)]
    gps_node: Optional[BTNode] = None
    for rank, sensor in enumerate(main_sensors):
        spec = SensorSubtreeSpec(sensor, target_filter="main", priority_rank=rank)
        node = build_single_sensor_subtree(spec, rt)
        if sensor is Sensor.GPS:
            gps_node = node
        main_children.append(node)
    main_children.append(make_dr_leaf(rt))
    main_selector = Selector("main-localisation", main_children)
    children.append(main_selector)
    root = Parallel("root", children)

    # register the context-prunable GPS subtrees
    rt.gps_slots.clear()
    if include_backup:
        rt.gps_slots["backup"] = SubtreeSlot(
            factory=lambda: build_single_sensor_subtree(
                SensorSubtreeSpec(Sensor.GPS, target_filter="backup", init_block=True), rt),
            node=children[1], parent_id=None, index=1, present=True)
    if gps_node is not None:
        rt.gps_slots["main"] = SubtreeSlot(
            factory=lambda: build_single_sensor_subtree(
                SensorSubtreeSpec(Sensor.GPS, target_filter="main"), rt),
            node=gps_node, parent_id=None, index=main_children.index(gps_node),
            present=True)
    return root


def finalize_slots(rt) -> None:
    """Fill in parent ids once the tree has assigned node ids."""
    for slot in rt.gps_slots.values():
        if slot.node is not None and slot.node.parent is not None:
            slot.parent_id = slot.node.parent.node_id
            slot.index = slot.node.parent.children.index(slot.node)


def binding_registry(rt) -> dict[str, Callable[[str], BTNode]]:
    """Leaf/subtree factories for declarative (JSON) tree definitions."""

    def spec_subtree(sensor: Sensor, fid: str, block: bool):
        def make(name: str) -> BTNode:
            node = build_single_sensor_subtree(
                SensorSubtreeSpec(sensor, target_filter=fid, init_block=block), rt)
            if fid == "backup" or sensor is Sensor.GPS:
                slot_key = "backup" if fid == "backup" else "main"
                rt.gps_slots[slot_key] = SubtreeSlot(
                    factory=lambda: build_single_sensor_subtree(
                        SensorSubtreeSpec(sensor, target_filter=fid, init_block=block), rt),
                    node=node, present=True)
            return node
        return make

    return {
        "topic-listeners": lambda name: make_topic_listeners(rt),
        "gps-context-gate": lambda name: make_gps_context_gate(rt),
        "reset-monitor": lambda name: make_reset_monitor(rt),
        "dead-reckoning": lambda name: make_dr_leaf(rt),
        "backup-gps-subtree": spec_subtree(Sensor.GPS, "backup", True),
        "main-gps-subtree": spec_subtree(Sensor.GPS, "main", False),
        "main-lidar-subtree": spec_subtree(Sensor.LIDAR, "main", False),
    }


def default_tree_dict() -> dict:
    """JSON-expressible definition equivalent to :func:`build_experiment_tree`."""
    return {
        "kind": "parallel", "name": "root", "children": [
            {"kind": "sequence", "name": "information-gathering", "children": [
                {"kind": "condition", "name": "topic-listeners",
                 "binding": "topic-listeners"},
                {"kind": "action", "name": "gps-context-gate",
                 "binding": "gps-context-gate"},
            ]},
            {"kind": "subtree", "name": "backup-gps-filter",
             "binding": "backup-gps-subtree"},
            {"kind": "selector", "name": "main-localisation", "children": [
                {"kind": "condition", "name": "reset-monitor",
                 "binding": "reset-monitor"},
                {"kind": "subtree", "name": "main-lidar",
                 "binding": "main-lidar-subtree"},
                {"kind": "subtree", "name": "main-gps",
                 "binding": "main-gps-subtree"},
                {"kind": "condition", "name": "dead-reckoning",
                 "binding": "dead-reckoning"},
            ]},
        ],
    }
