"""Map-anchored scenarios: agents, trigger volumes, bindings, routes.

A scenario file is a strict UTF-8 JSON document (unknown keys rejected with
path-qualified errors), versioned by the required ``"portobello_scenario": 1``
key.  All lengths are meters, speeds m/s, angles radians.  Everything is
placed in the map frame, never relative to the vehicle, which is what makes a
scenario portable between execution platforms.

Execution semantics live in :class:`ScenarioRun`:

* Triggers are edge-triggered on entry of the vehicle frame origin; starting
  inside a volume counts as an entry on the first step.  Simultaneous firings
  execute in scenario-file order.  ``one_shot`` volumes disarm after firing.
* ``start_agent`` begins path following and activates the agent;
  ``stop_agent`` halts motion but leaves it active; ``set_active`` toggles
  existence for rendering/visibility.
* Agents advance along piecewise-linear paths with exact arc-length
  integration across waypoint boundaries; heading faces travel direction.
* Visibility is a horizontal (XY) distance test with inclusive boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .frames import RigidTransform, Timestamp
from .pointcloud import PointCloudMap

SCHEMA_VERSION = 1
DEFAULT_RENDER_DISTANCE = 45.0


class SchemaError(Exception):
    def __init__(self, path: str, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class DanglingReference(Exception):
    def __init__(self, ref: str, where: str):
        super().__init__(f"{where} references unknown id {ref!r}")
        self.ref = ref
        self.where = where


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class BoxVolume:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]

    def __post_init__(self):
        if min(self.half_extents) <= 0:
            raise ValueError("box half extents must be positive")

    def contains(self, p) -> bool:
        return all(abs(p[i] - self.center[i]) <= self.half_extents[i] for i in range(3))


@dataclass(frozen=True)
class CylinderVolume:
    center: tuple[float, float, float]  # base center
    radius: float
    height: float

    def __post_init__(self):
        if self.radius <= 0 or self.height <= 0:
            raise ValueError("cylinder radius and height must be positive")

    def contains(self, p) -> bool:
        dx, dy = p[0] - self.center[0], p[1] - self.center[1]
        if dx * dx + dy * dy > self.radius * self.radius:
            return False
        return self.center[2] <= p[2] <= self.center[2] + self.height


@dataclass(frozen=True)
class TriggerVolume:
    id: str
    shape: BoxVolume | CylinderVolume
    one_shot: bool = True


@dataclass(frozen=True)
class PathLeg:
    waypoint: tuple[float, float, float]
    speed: float

    def __post_init__(self):
        if self.speed <= 0:
            raise ValueError("path speed must be positive")


@dataclass(frozen=True)
class VirtualAgent:
    id: str
    kind: str  # pedestrian | prop
    initial_pose: RigidTransform
    path: tuple[PathLeg, ...] = ()
    initially_active: bool = False


@dataclass(frozen=True)
class EventAction:
    kind: str  # start_agent | stop_agent | set_active | emit_marker
    agent_id: str | None = None
    active: bool | None = None
    label: str | None = None


@dataclass(frozen=True)
class TriggerBinding:
    trigger_id: str
    actions: tuple[EventAction, ...]


@dataclass(frozen=True)
class RouteWaypoint:
    position: tuple[float, float, float]
    target_speed: float
    stop: bool = False

    def __post_init__(self):
        if self.target_speed <= 0:
            raise ValueError("target speed must be positive")


@dataclass(frozen=True)
class Scenario:
    map_ref: str
    agents: tuple[VirtualAgent, ...] = ()
    triggers: tuple[TriggerVolume, ...] = ()
    bindings: tuple[TriggerBinding, ...] = ()
    route: tuple[RouteWaypoint, ...] = ()
    render_distance: float = DEFAULT_RENDER_DISTANCE
    map_hash: str | None = None

    def __post_init__(self):
        agent_ids = [a.id for a in self.agents]
        trigger_ids = [t.id for t in self.triggers]
        if len(set(agent_ids)) != len(agent_ids):
            raise SchemaError("agents", "duplicate agent id")
        if len(set(trigger_ids)) != len(trigger_ids):
            raise SchemaError("triggers", "duplicate trigger id")
        known_agents = set(agent_ids)
        known_triggers = set(trigger_ids)
        for i, b in enumerate(self.bindings):
            if b.trigger_id not in known_triggers:
                raise DanglingReference(b.trigger_id, f"bindings[{i}]")
            for j, act in enumerate(b.actions):
                if act.kind in ("start_agent", "stop_agent", "set_active"):
                    if act.agent_id not in known_agents:
                        raise DanglingReference(str(act.agent_id), f"bindings[{i}].actions[{j}]")
        for i in range(1, len(self.route)):
            if self.route[i].position == self.route[i - 1].position:
                raise SchemaError(f"route[{i}]", "consecutive waypoints must be distinct")

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(serialize_scenario(self).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TriggerEvent:
    stamp: Timestamp
    trigger_id: str
    vehicle_pose_at_fire: RigidTransform
    actions_executed: tuple[EventAction, ...]
    agent_positions: dict = field(default_factory=dict, compare=False)


# ---------------------------------------------------------------------------
# parse / serialize


def _expect_keys(obj: dict, path: str, required: tuple[str, ...], optional: tuple[str, ...] = ()):
    for key in obj:
        if key not in required and key not in optional:
            raise SchemaError(f"{path}.{key}", "unknown key")
    for key in required:
        if key not in obj:
            raise SchemaError(f"{path}.{key}", "missing required key")


def _vec3(v, path: str) -> tuple[float, float, float]:
    if not isinstance(v, (list, tuple)) or len(v) != 3:
        raise SchemaError(path, "expected a 3-element array")
    try:
        out = tuple(float(x) for x in v)
    except (TypeError, ValueError):
        raise SchemaError(path, "expected numeric components")
    if not all(math.isfinite(x) for x in out):
        raise SchemaError(path, "components must be finite")
    return out


def _number(v, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(path, "expected a number")
    return float(v)


def _bool(v, path: str) -> bool:
    if not isinstance(v, bool):
        raise SchemaError(path, "expected a boolean")
    return v


def _string(v, path: str) -> str:
    if not isinstance(v, str) or not v:
        raise SchemaError(path, "expected a non-empty string")
    return v


def _parse_pose(obj, path: str) -> RigidTransform:
    if not isinstance(obj, dict):
        raise SchemaError(path, "expected an object")
    _expect_keys(obj, path, ("position",), ("orientation",))
    pos = _vec3(obj["position"], f"{path}.position")
    quat = obj.get("orientation", [1.0, 0.0, 0.0, 0.0])
    if not isinstance(quat, (list, tuple)) or len(quat) != 4:
        raise SchemaError(f"{path}.orientation", "expected a 4-element array (w, x, y, z)")
    return RigidTransform(np.asarray(quat, dtype=np.float64), np.asarray(pos))


def _parse_shape(obj, path: str):
    if not isinstance(obj, dict):
        raise SchemaError(path, "expected an object")
    kind = obj.get("type")
    if kind == "box":
        _expect_keys(obj, path, ("type", "center", "half_extents"))
        try:
            return BoxVolume(_vec3(obj["center"], f"{path}.center"), _vec3(obj["half_extents"], f"{path}.half_extents"))
        except ValueError as e:
            raise SchemaError(path, str(e))
    if kind == "cylinder":
        _expect_keys(obj, path, ("type", "center", "radius", "height"))
        try:
            return CylinderVolume(
                _vec3(obj["center"], f"{path}.center"),
                _number(obj["radius"], f"{path}.radius"),
                _number(obj["height"], f"{path}.height"),
            )
        except ValueError as e:
            raise SchemaError(path, str(e))
    raise SchemaError(f"{path}.type", f"unknown shape type {kind!r}")


_ACTION_KEYS = {
    "start_agent": (("type", "agent_id"), ()),
    "stop_agent": (("type", "agent_id"), ()),
    "set_active": (("type", "agent_id", "active"), ()),
    "emit_marker": (("type", "label"), ()),
}


def _parse_action(obj, path: str) -> EventAction:
    if not isinstance(obj, dict):
        raise SchemaError(path, "expected an object")
    kind = obj.get("type")
    if kind not in _ACTION_KEYS:
        raise SchemaError(f"{path}.type", f"unknown action type {kind!r}")
    required, optional = _ACTION_KEYS[kind]
    _expect_keys(obj, path, required, optional)
    if kind == "emit_marker":
        return EventAction("emit_marker", label=_string(obj["label"], f"{path}.label"))
    agent_id = _string(obj["agent_id"], f"{path}.agent_id")
    if kind == "set_active":
        return EventAction("set_active", agent_id=agent_id, active=_bool(obj["active"], f"{path}.active"))
    return EventAction(kind, agent_id=agent_id)


def parse_scenario(text: str) -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError("$", f"invalid JSON: {e}")
    if not isinstance(doc, dict):
        raise SchemaError("$", "top level must be an object")
    _expect_keys(
        doc,
        "$",
        ("portobello_scenario", "map_ref"),
        ("render_distance", "agents", "triggers", "bindings", "route", "map_hash"),
    )
    if doc["portobello_scenario"] != SCHEMA_VERSION:
        raise SchemaError("$.portobello_scenario", f"unsupported version {doc['portobello_scenario']!r}")

    agents = []
    for i, a in enumerate(doc.get("agents", [])):
        path = f"$.agents[{i}]"
        if not isinstance(a, dict):
            raise SchemaError(path, "expected an object")
        _expect_keys(a, path, ("id", "kind", "initial_pose"), ("path", "initially_active"))
        kind = _string(a["kind"], f"{path}.kind")
        if kind not in ("pedestrian", "prop"):
            raise SchemaError(f"{path}.kind", f"unknown agent kind {kind!r}")
        legs = []
        for j, leg in enumerate(a.get("path", [])):
            leg_path = f"{path}.path[{j}]"
            if not isinstance(leg, dict):
                raise SchemaError(leg_path, "expected an object")
            _expect_keys(leg, leg_path, ("waypoint", "speed"))
            try:
                legs.append(PathLeg(_vec3(leg["waypoint"], f"{leg_path}.waypoint"), _number(leg["speed"], f"{leg_path}.speed")))
            except ValueError as e:
                raise SchemaError(leg_path, str(e))
        agents.append(
            VirtualAgent(
                id=_string(a["id"], f"{path}.id"),
                kind=kind,
                initial_pose=_parse_pose(a["initial_pose"], f"{path}.initial_pose"),
                path=tuple(legs),
                initially_active=_bool(a.get("initially_active", False), f"{path}.initially_active"),
            )
        )

    triggers = []
    for i, t in enumerate(doc.get("triggers", [])):
        path = f"$.triggers[{i}]"
        if not isinstance(t, dict):
            raise SchemaError(path, "expected an object")
        _expect_keys(t, path, ("id", "shape"), ("one_shot",))
        triggers.append(
            TriggerVolume(
                id=_string(t["id"], f"{path}.id"),
                shape=_parse_shape(t["shape"], f"{path}.shape"),
                one_shot=_bool(t.get("one_shot", True), f"{path}.one_shot"),
            )
        )

    bindings = []
    for i, b in enumerate(doc.get("bindings", [])):
        path = f"$.bindings[{i}]"
        if not isinstance(b, dict):
            raise SchemaError(path, "expected an object")
        _expect_keys(b, path, ("trigger_id", "actions"))
        actions = tuple(
            _parse_action(act, f"{path}.actions[{j}]") for j, act in enumerate(b["actions"])
        )
        bindings.append(TriggerBinding(_string(b["trigger_id"], f"{path}.trigger_id"), actions))

    route = []
    for i, w in enumerate(doc.get("route", [])):
        path = f"$.route[{i}]"
        if not isinstance(w, dict):
            raise SchemaError(path, "expected an object")
        _expect_keys(w, path, ("position", "target_speed"), ("stop",))
        try:
            route.append(
                RouteWaypoint(
                    _vec3(w["position"], f"{path}.position"),
                    _number(w["target_speed"], f"{path}.target_speed"),
                    _bool(w.get("stop", False), f"{path}.stop"),
                )
            )
        except ValueError as e:
            raise SchemaError(path, str(e))

    render = doc.get("render_distance", DEFAULT_RENDER_DISTANCE)
    render = _number(render, "$.render_distance")
    if render <= 0:
        raise SchemaError("$.render_distance", "must be positive")

    map_hash = doc.get("map_hash")
    if map_hash is not None:
        map_hash = _string(map_hash, "$.map_hash")

    return Scenario(
        map_ref=_string(doc["map_ref"], "$.map_ref"),
        agents=tuple(agents),
        triggers=tuple(triggers),
        bindings=tuple(bindings),
        route=tuple(route),
        render_distance=render,
        map_hash=map_hash,
    )


def _pose_json(t: RigidTransform) -> dict:
    return {
        "position": [float(v) for v in t.translation],
        "orientation": [float(v) for v in t.rotation],
    }


def _shape_json(s) -> dict:
    if isinstance(s, BoxVolume):
        return {"type": "box", "center": list(s.center), "half_extents": list(s.half_extents)}
    return {"type": "cylinder", "center": list(s.center), "radius": s.radius, "height": s.height}


def _action_json(a: EventAction) -> dict:
    if a.kind == "emit_marker":
        return {"type": "emit_marker", "label": a.label}
    if a.kind == "set_active":
        return {"type": "set_active", "agent_id": a.agent_id, "active": a.active}
    return {"type": a.kind, "agent_id": a.agent_id}


def scenario_to_json(s: Scenario) -> dict:
    doc = {
        "portobello_scenario": SCHEMA_VERSION,
        "map_ref": s.map_ref,
        "render_distance": s.render_distance,
        "agents": [
            {
                "id": a.id,
                "kind": a.kind,
                "initial_pose": _pose_json(a.initial_pose),
                "path": [{"waypoint": list(l.waypoint), "speed": l.speed} for l in a.path],
                "initially_active": a.initially_active,
            }
            for a in s.agents
        ],
        "triggers": [
            {"id": t.id, "shape": _shape_json(t.shape), "one_shot": t.one_shot} for t in s.triggers
        ],
        "bindings": [
            {"trigger_id": b.trigger_id, "actions": [_action_json(a) for a in b.actions]}
            for b in s.bindings
        ],
        "route": [
            {"position": list(w.position), "target_speed": w.target_speed, "stop": w.stop}
            for w in s.route
        ],
    }
    if s.map_hash is not None:
        doc["map_hash"] = s.map_hash
    return doc


def serialize_scenario(s: Scenario) -> str:
    return json.dumps(scenario_to_json(s), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# validation against a map


@dataclass(frozen=True)
class ValidationIssue:
    severity: str  # "error" | "warning"
    code: str
    entity: str
    message: str


def validate_against_map(s: Scenario, pc_map: PointCloudMap, max_offmap: float = 5.0) -> list[ValidationIssue]:
    """Check that staged entities actually lie in mapped territory.

    Entities farther than ``max_offmap`` from any map point are errors;
    overlapping triggers are warnings.  Issues are returned, never raised.
    """
    issues: list[ValidationIssue] = []

    if s.map_hash is not None and s.map_hash != pc_map.digest:
        issues.append(
            ValidationIssue("error", "MapHashMismatch", "$", "scenario was staged against a different map")
        )

    def check_point(p, entity: str):
        _, d = pc_map.index.nearest(p)
        if d > max_offmap:
            issues.append(
                ValidationIssue(
                    "error", "OutOfMap", entity, f"{d:.1f} m from nearest map point (limit {max_offmap})"
                )
            )

    for a in s.agents:
        check_point(a.initial_pose.translation, f"agent:{a.id}")
        for j, leg in enumerate(a.path):
            check_point(np.asarray(leg.waypoint), f"agent:{a.id}.path[{j}]")
    for t in s.triggers:
        check_point(np.asarray(t.shape.center), f"trigger:{t.id}")
    for i, w in enumerate(s.route):
        check_point(np.asarray(w.position), f"route[{i}]")

    for i in range(len(s.triggers)):
        for j in range(i + 1, len(s.triggers)):
            if _shapes_overlap(s.triggers[i].shape, s.triggers[j].shape):
                issues.append(
                    ValidationIssue(
                        "warning",
                        "TriggerOverlap",
                        f"trigger:{s.triggers[i].id}",
                        f"overlaps trigger {s.triggers[j].id!r}",
                    )
                )
    return issues


def _shape_bounds(s) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(s, BoxVolume):
        c, h = np.asarray(s.center), np.asarray(s.half_extents)
        return c - h, c + h
    c = np.asarray(s.center)
    return (
        c - [s.radius, s.radius, 0.0],
        c + [s.radius, s.radius, s.height],
    )


def _shapes_overlap(a, b) -> bool:
    lo_a, hi_a = _shape_bounds(a)
    lo_b, hi_b = _shape_bounds(b)
    return bool(np.all(lo_a <= hi_b) and np.all(lo_b <= hi_a))


# ---------------------------------------------------------------------------
# execution


@dataclass
class AgentState:
    agent: VirtualAgent
    position: np.ndarray
    yaw: float
    active: bool
    started: bool = False
    leg: int = 0  # index of the path leg being traversed
    leg_progress: float = 0.0  # meters into the current leg

    @property
    def pose(self) -> RigidTransform:
        return RigidTransform.from_yaw(self.yaw, self.position)

    @property
    def done(self) -> bool:
        return self.leg >= len(self.agent.path)


class ScenarioRun:
    """Mutable run-state for one scenario execution.

    Owned by a single execution loop; snapshots handed to other threads are
    plain immutable values.
    """

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.agents: dict[str, AgentState] = {}
        for a in scenario.agents:
            self.agents[a.id] = AgentState(
                agent=a,
                position=a.initial_pose.translation.copy(),
                yaw=a.initial_pose.yaw(),
                active=a.initially_active,
            )
        self._armed: dict[str, bool] = {t.id: True for t in scenario.triggers}
        self._was_inside: dict[str, bool] = {t.id: False for t in scenario.triggers}
        self._bindings_by_trigger: dict[str, tuple[TriggerBinding, ...]] = {}
        for b in scenario.bindings:
            self._bindings_by_trigger.setdefault(b.trigger_id, ())
            self._bindings_by_trigger[b.trigger_id] += (b,)
        self.events: list[TriggerEvent] = []
        self.markers: list[tuple[Timestamp, str]] = []

    # -- triggers

    def trigger_step(self, vehicle_pose: RigidTransform, stamp: Timestamp) -> list[TriggerEvent]:
        """Fire entry-edge triggers for this vehicle position; mutates agent state."""
        p = vehicle_pose.translation
        fired: list[TriggerEvent] = []
        for trig in self.scenario.triggers:  # scenario-file order
            inside = trig.shape.contains(p)
            entered = inside and not self._was_inside[trig.id]
            self._was_inside[trig.id] = inside
            if not entered or not self._armed[trig.id]:
                continue
            if trig.one_shot:
                self._armed[trig.id] = False
            executed: list[EventAction] = []
            for binding in self._bindings_by_trigger.get(trig.id, ()):
                for action in binding.actions:
                    self._apply_action(action, stamp)
                    executed.append(action)
            event = TriggerEvent(
                stamp=stamp,
                trigger_id=trig.id,
                vehicle_pose_at_fire=vehicle_pose,
                actions_executed=tuple(executed),
                agent_positions={aid: st.position.copy() for aid, st in self.agents.items()},
            )
            fired.append(event)
            self.events.append(event)
        return fired

    def _apply_action(self, action: EventAction, stamp: Timestamp) -> None:
        if action.kind == "emit_marker":
            self.markers.append((stamp, action.label or ""))
            return
        state = self.agents[action.agent_id]
        if action.kind == "start_agent":
            state.started = True
            state.active = True
        elif action.kind == "stop_agent":
            state.started = False
        elif action.kind == "set_active":
            state.active = bool(action.active)

    # -- agents

    def agent_step(self, dt: float) -> None:
        """Advance started agents along their paths by exact arc length."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        for state in self.agents.values():
            if not state.started or state.done:
                continue
            remaining = dt
            while remaining > 0 and not state.done:
                leg = state.agent.path[state.leg]
                target = np.asarray(leg.waypoint, dtype=np.float64)
                seg = target - state.position
                dist = float(np.linalg.norm(seg))
                if dist < 1e-12:
                    state.leg += 1
                    state.leg_progress = 0.0
                    continue
                direction = seg / dist
                state.yaw = math.atan2(direction[1], direction[0])
                step = leg.speed * remaining
                # nanometer snap so float drift cannot stall arrival forever
                if step + 1e-9 < dist:
                    state.position = state.position + direction * step
                    state.leg_progress += step
                    remaining = 0.0
                else:
                    state.position = target.copy()
                    remaining = max(0.0, remaining - dist / leg.speed)
                    state.leg += 1
                    state.leg_progress = 0.0
            if state.done:
                state.started = False

    # -- visibility

    def visible_agents(self, vehicle_pose: RigidTransform) -> set[str]:
        return visibility_filter(
            vehicle_pose,
            {aid: (st.position, st.active) for aid, st in self.agents.items()},
            self.scenario.render_distance,
        )

    def agent_snapshot(self) -> dict[str, dict]:
        return {
            aid: {
                "position": st.position.copy(),
                "yaw": st.yaw,
                "active": st.active,
                "started": st.started,
            }
            for aid, st in self.agents.items()
        }

    def trigger_snapshot(self) -> dict[str, bool]:
        """Armed state per trigger id."""
        return dict(self._armed)


def visibility_filter(vehicle_pose: RigidTransform, agents: dict, render_distance: float) -> set[str]:
    """Ids of active agents within the horizontal render cap (inclusive).

    ``agents`` maps id -> (position, active_flag).
    """
    if render_distance <= 0:
        raise ValueError("render distance must be positive")
    vx, vy = vehicle_pose.translation[0], vehicle_pose.translation[1]
    out = set()
    for aid, (pos, active) in agents.items():
        if not active:
            continue
        dx, dy = pos[0] - vx, pos[1] - vy
        if math.hypot(dx, dy) <= render_distance:
            out.add(aid)
    return out
