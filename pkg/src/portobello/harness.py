"""Twinned execution: the same scenario on a simulated or a replayed vehicle.

The in-lab twin (`run_sim`) drives a point-kinematic vehicle along the route
with pure-pursuit steering and a trapezoidal speed profile, holding at stop
waypoints.  The on-road twin (`run_replay`) never sees the route: it localizes
range scans against the map and evaluates the same trigger/agent semantics at
a 50 Hz tick using constant-velocity interpolation between 10 Hz estimates.
Both paths share kinematics: the replay scans are synthesized from the
trajectory the follower itself produced, so any disagreement between the runs
is attributable to sensing and estimation.

Run logs are newline-delimited JSON with a header record carrying the
scenario hash, mode, seeds, and config; `compare_runs` reduces two logs to a
single TwinningReport.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .frames import RigidTransform, Timestamp, nanos_to_sec, sec_to_nanos
from .localization import IcpConfig, InitializationFailed, Localizer, PoseEstimate, predict
from .pointcloud import PointCloud, PointCloudMap
from .scenario import (
    BoxVolume,
    EventAction,
    PathLeg,
    RouteWaypoint,
    Scenario,
    ScenarioRun,
    TriggerBinding,
    TriggerEvent,
    TriggerVolume,
    VirtualAgent,
)


class RouteUnreachable(Exception):
    """Follower deviated too far from the route polyline."""


class ScenarioMismatch(Exception):
    """Two run logs do not come from the same scenario."""


class StopRun(Exception):
    """Raised by an on_tick callback to end a run early; the partial log survives."""


# ---------------------------------------------------------------------------
# configs and records


@dataclass
class WaypointFollower:
    lookahead: float = 3.0
    max_accel: float = 2.0
    stop_hold: float = 3.0

    def __post_init__(self):
        if min(self.lookahead, self.max_accel, self.stop_hold) <= 0:
            raise ValueError("follower parameters must be positive")


@dataclass
class SensorModel:
    mode: str = "map-sample"  # or "raycast"
    max_range: float = 50.0
    points_per_scan: int = 2000
    noise_sigma: float = 0.02
    rate_hz: float = 10.0

    def __post_init__(self):
        if self.mode not in ("map-sample", "raycast"):
            raise ValueError(f"unknown sensor mode {self.mode!r}")
        if min(self.max_range, self.points_per_scan, self.rate_hz) <= 0 or self.noise_sigma < 0:
            raise ValueError("sensor parameters must be positive")


@dataclass
class Disturbance:
    kind: str  # pause | scan-dropout | clutter
    start: float = 0.0  # seconds
    duration: float = 0.0
    radius: float = 2.0  # clutter only: meters around the sensor
    count: int = 0  # clutter only: points per affected scan

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticWorld:
    map: PointCloudMap
    ground_truth: list[tuple[Timestamp, RigidTransform]]
    generator_seed: int


@dataclass
class RunLog:
    mode: str  # "sim" | "replay"
    scenario_hash: str
    seeds: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    poses: list[tuple[Timestamp, RigidTransform]] = field(default_factory=list)
    estimates: list[PoseEstimate] = field(default_factory=list)
    events: list[TriggerEvent] = field(default_factory=list)
    agent_samples: list[tuple[Timestamp, dict]] = field(default_factory=list)
    disturbances: list[Disturbance] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def trigger_ids(self) -> list[str]:
        return [e.trigger_id for e in self.events]


# ---------------------------------------------------------------------------
# route geometry helpers


class _Polyline:
    def __init__(self, waypoints: tuple[RouteWaypoint, ...]):
        if len(waypoints) < 2:
            raise ValueError("route needs at least two waypoints")
        self.pts = np.array([w.position for w in waypoints], dtype=np.float64)
        seg = np.diff(self.pts, axis=0)
        self.seg_len = np.linalg.norm(seg, axis=1)
        self.cum = np.concatenate(([0.0], np.cumsum(self.seg_len)))
        self.total = float(self.cum[-1])
        self.waypoints = waypoints

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.total)
        i = int(np.searchsorted(self.cum, s, side="right")) - 1
        i = min(i, len(self.seg_len) - 1)
        f = (s - self.cum[i]) / self.seg_len[i] if self.seg_len[i] > 0 else 0.0
        return self.pts[i] + f * (self.pts[i + 1] - self.pts[i])

    def project(self, p: np.ndarray, s_hint: float | None = None,
                back: float = 4.0, ahead: float = 15.0) -> tuple[float, float]:
        """Arc length of the closest polyline point and the lateral distance.

        With ``s_hint`` only segments near that arc are considered, which keeps
        progress monotonic on closed loops whose endpoint coincides with the
        start.
        """
        a = self.pts[:-1]
        d = self.pts[1:] - a
        t = np.clip(np.einsum("ij,ij->i", p[None, :2].repeat(len(a), 0) - a[:, :2], d[:, :2]) / np.maximum(
            np.einsum("ij,ij->i", d[:, :2], d[:, :2]), 1e-18), 0.0, 1.0)
        closest = a + t[:, None] * d
        dist2 = np.sum((closest[:, :2] - p[:2]) ** 2, axis=1)
        if s_hint is not None:
            outside = (self.cum[1:] < s_hint - back) | (self.cum[:-1] > s_hint + ahead)
            if not np.all(outside):
                dist2 = np.where(outside, np.inf, dist2)
        i = int(np.argmin(dist2))
        s = float(self.cum[i] + t[i] * self.seg_len[i])
        return s, float(math.sqrt(dist2[i]))

    def segment_index(self, s: float) -> int:
        i = int(np.searchsorted(self.cum, min(max(s, 0.0), self.total), side="right")) - 1
        return min(max(i, 0), len(self.seg_len) - 1)

    def stop_arcs(self) -> list[float]:
        return [float(self.cum[i]) for i, w in enumerate(self.waypoints) if w.stop]


# ---------------------------------------------------------------------------
# in-lab twin: pure-pursuit sim engine


class SimEngine:
    """Deterministic fixed-step vehicle + scenario execution.

    ``hold_mode`` is ``"timed"`` (resume after ``stop_hold`` seconds) or
    ``"operator"`` (wait for a proceed command); operator commands are applied
    at tick boundaries by whoever drives the engine.
    """

    STOP_TOLERANCE = 0.2  # meters of arc
    FINISH_TOLERANCE = 0.3
    MAX_ROUTE_DEVIATION = 5.0
    SLOW_SPEED = 0.05

    def __init__(self, scenario: Scenario, follower: WaypointFollower | None = None,
                 dt: float = 0.02, hold_mode: str = "timed"):
        if not scenario.route:
            raise ValueError("scenario has no route")
        if hold_mode not in ("timed", "operator"):
            raise ValueError(f"unknown hold mode {hold_mode!r}")
        self.scenario = scenario
        self.follower = follower or WaypointFollower()
        self.dt = dt
        self.hold_mode = hold_mode
        self.route = _Polyline(scenario.route)
        self.run = ScenarioRun(scenario)

        self.position = np.array(scenario.route[0].position, dtype=np.float64)
        first_dir = self.route.pts[1] - self.route.pts[0]
        self.yaw = math.atan2(first_dir[1], first_dir[0])
        self.speed = 0.0
        self.tick_index = 0
        self.paused = False
        self.holding_until: float | None = None  # sim-time seconds, math.inf for operator holds
        self._pending_stops = self.route.stop_arcs()
        self._progress = 0.0  # monotone arc hint for loop-safe projection
        self.finished = False

    @property
    def time(self) -> float:
        return self.tick_index * self.dt

    @property
    def stamp(self) -> Timestamp:
        return sec_to_nanos(self.time)

    @property
    def holding(self) -> bool:
        return self.holding_until is not None

    @property
    def pose(self) -> RigidTransform:
        return RigidTransform.from_yaw(self.yaw, self.position)

    def proceed(self) -> bool:
        """Operator resume; only meaningful while holding."""
        if self.holding:
            self.holding_until = self.time  # released on the next tick
            return True
        return False

    def pause(self) -> None:
        self.paused = True

    def resume(self) -> None:
        self.paused = False

    def status(self) -> str:
        if self.finished:
            return "finished"
        if self.paused:
            return "paused"
        if self.holding:
            return "holding-at-stop"
        return "running"

    def tick(self) -> list[TriggerEvent]:
        """Advance one step; returns trigger events fired this tick.

        A paused run is frozen entirely: no time, vehicle, agent, or trigger
        progress until resumed.
        """
        if self.finished or self.paused:
            return []
        self.tick_index += 1
        dt = self.dt

        if self.holding:
            self.speed = 0.0
            if self.time >= self.holding_until:
                self.holding_until = None
        else:
            self._advance_vehicle(dt)

        events = self.run.trigger_step(self.pose, self.stamp)
        self.run.agent_step(dt)
        return events

    def _advance_vehicle(self, dt: float) -> None:
        s, lateral = self.route.project(self.position, s_hint=self._progress)
        self._progress = max(self._progress, s)
        if lateral > self.MAX_ROUTE_DEVIATION:
            raise RouteUnreachable(f"{lateral:.2f} m off the route at arc {s:.1f}")

        fol = self.follower
        seg = self.route.segment_index(s)
        target_speed = self.route.waypoints[seg + 1].target_speed

        remaining_end = max(self.route.total - s, 0.0)
        v_cmd = min(target_speed, math.sqrt(2 * fol.max_accel * remaining_end))
        # brake ahead of slower segments so entry speed respects their target
        for i in range(seg + 1, len(self.route.waypoints) - 1):
            gap = self.route.cum[i] - s
            if gap > v_cmd * v_cmd / (2 * fol.max_accel):
                break
            vt = self.route.waypoints[i + 1].target_speed
            v_cmd = min(v_cmd, math.sqrt(vt * vt + 2 * fol.max_accel * max(gap, 0.0)))
        if self._pending_stops:
            d_stop = self._pending_stops[0] - s
            v_cmd = min(v_cmd, math.sqrt(2 * fol.max_accel * max(d_stop, 0.0)))
            # signed test so a slight overshoot still counts as arrival
            if d_stop < self.STOP_TOLERANCE and self.speed < self.SLOW_SPEED:
                self._pending_stops.pop(0)
                self.speed = 0.0
                if self.hold_mode == "timed":
                    self.holding_until = self.time + fol.stop_hold
                else:
                    self.holding_until = math.inf
                return

        self.speed += float(np.clip(v_cmd - self.speed, -fol.max_accel * dt, fol.max_accel * dt))

        look = self.route.point_at(min(s + fol.lookahead, self.route.total))
        alpha = _wrap_angle(math.atan2(look[1] - self.position[1], look[0] - self.position[0]) - self.yaw)
        curvature = 2.0 * math.sin(alpha) / fol.lookahead
        self.yaw = _wrap_angle(self.yaw + self.speed * curvature * dt)
        self.position = self.position + self.speed * dt * np.array([math.cos(self.yaw), math.sin(self.yaw), 0.0])
        self.position[2] = self.route.point_at(s)[2]

        if remaining_end < self.FINISH_TOLERANCE and self.speed < self.SLOW_SPEED and not self._pending_stops:
            self.finished = True
            self.speed = 0.0


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def run_sim(
    scenario: Scenario,
    follower: WaypointFollower | None = None,
    dt: float = 0.02,
    max_duration: float = 600.0,
    on_tick=None,
) -> RunLog:
    """Drive the in-lab twin to route completion; fully deterministic."""
    engine = SimEngine(scenario, follower, dt)
    log = RunLog(
        mode="sim",
        scenario_hash=scenario.digest(),
        config={"dt": dt, "follower": asdict(engine.follower)},
    )
    sample_every = max(1, int(round(1.0 / dt)))  # agent samples at 1 Hz
    try:
        while not engine.finished and engine.time < max_duration:
            events = engine.tick()
            log.poses.append((engine.stamp, engine.pose))
            log.events.extend(events)
            if engine.tick_index % sample_every == 0 or events:
                log.agent_samples.append((engine.stamp, engine.run.agent_snapshot()))
            if on_tick is not None:
                on_tick(engine, events)
    except StopRun as e:
        log.notes.append(f"stopped early: {e}")
        return log
    if not engine.finished:
        log.notes.append(f"run stopped at max duration {max_duration}s")
    return log


# ---------------------------------------------------------------------------
# synthetic worlds


@dataclass
class WorldSpec:
    route_length: float = 200.0
    crosswalk_count: int = 15
    seed: int = 0
    ground_density: float = 300.0  # points per meter of route
    wall_density: float = 40.0  # points per meter of wall
    road_half_width: float = 4.0
    wall_offset: float = 7.0
    cruise_speed: float = 5.0
    corner_speed: float = 2.5  # keeps yaw rates trackable for the localizer
    corner_zone: float = 8.0  # meters of arc around each corner at corner_speed
    trigger_lead: float = 8.0

    def __post_init__(self):
        if self.route_length <= 0 or self.crosswalk_count < 0:
            raise ValueError("route length must be positive")


def _rectangle_loop(length: float) -> tuple[np.ndarray, float, float]:
    """Axis-aligned rectangle with perimeter ``length``; returns corners, a, b."""
    b = length / 6.0
    a = 2.0 * b
    corners = np.array([[0.0, 0.0], [a, 0.0], [a, b], [0.0, b]])
    return corners, a, b


def _loop_point(corners: np.ndarray, perimeter: float, s: float) -> tuple[np.ndarray, np.ndarray]:
    """Position and forward direction at arc length s along the rectangle."""
    s = s % perimeter
    for i in range(4):
        p0 = corners[i]
        p1 = corners[(i + 1) % 4]
        seg = float(np.linalg.norm(p1 - p0))
        if s <= seg:
            d = (p1 - p0) / seg
            return p0 + s * d, d
        s -= seg
    return corners[0], (corners[1] - corners[0]) / np.linalg.norm(corners[1] - corners[0])


def synthesize_world(spec: WorldSpec | None = None,
                     follower: WaypointFollower | None = None,
                     sim_dt: float = 0.02) -> tuple[SyntheticWorld, Scenario]:
    """Deterministic demo world: a rectangular loop with crosswalk events.

    The map holds ground, walls on both sides of the road, and vertical posts
    (corner and crosswalk poles) so scan matching is constrained everywhere.
    The scenario stages one trigger plus one crossing pedestrian per
    crosswalk; the ground-truth trajectory is produced by the same waypoint
    follower the sim twin uses.
    """
    spec = spec or WorldSpec()
    rng = np.random.default_rng(spec.seed)
    corners, a, b = _rectangle_loop(spec.route_length)
    perimeter = 2 * (a + b)

    # --- map points
    clouds = []
    n_ground = int(spec.ground_density * perimeter)
    s_g = rng.uniform(0, perimeter, n_ground)
    lat_g = rng.uniform(-spec.wall_offset, spec.wall_offset, n_ground)
    g_pts = np.empty((n_ground, 3))
    for i, (s, lat) in enumerate(zip(s_g, lat_g)):
        p, d = _loop_point(corners, perimeter, s)
        n = np.array([-d[1], d[0]])
        g_pts[i, :2] = p + lat * n
        g_pts[i, 2] = 0.0
    clouds.append(g_pts)

    for offset in (spec.wall_offset, -spec.wall_offset):
        # walls follow offset rectangles; the inner one vanishes on tight loops
        out = _offset_rectangle(corners, offset)
        if out is None:
            continue
        wall_perim = float(np.sum(np.linalg.norm(np.roll(out, -1, axis=0) - out, axis=1)))
        n_wall = int(spec.wall_density * wall_perim)
        s_w = rng.uniform(0, wall_perim, n_wall)
        w_pts = np.empty((n_wall, 3))
        for i, s in enumerate(s_w):
            p, _ = _loop_point(out, wall_perim, s)
            w_pts[i, :2] = p
        w_pts[:, 2] = rng.uniform(0.0, 3.0, n_wall)
        clouds.append(w_pts)

    def post(xy, height=2.5, n=50):
        pts = np.empty((n, 3))
        pts[:, 0] = xy[0] + rng.normal(0, 0.03, n)
        pts[:, 1] = xy[1] + rng.normal(0, 0.03, n)
        pts[:, 2] = rng.uniform(0, height, n)
        return pts

    # corner poles and periodic roadside posts
    for c in corners:
        clouds.append(post(c + np.array([1.0, 1.0])))
    for s in np.arange(0.0, perimeter, 9.0):
        p, d = _loop_point(corners, perimeter, s)
        n = np.array([-d[1], d[0]])
        side = 1.0 if int(s / 9.0) % 2 == 0 else -1.0
        clouds.append(post(p + side * (spec.road_half_width + 1.2) * n))

    # --- scenario: route, crosswalk stops, triggers, pedestrians
    margin = 6.0  # keep staged stops away from corners
    corner_arcs = [0.0, a, a + b, 2 * a + b, perimeter]

    def near_corner(s):
        return any(abs(s - c) < margin or abs(s - c + perimeter) < margin or abs(s - c - perimeter) < margin
                   for c in corner_arcs)

    cross_arcs = []
    step = perimeter / max(spec.crosswalk_count, 1)
    for i in range(spec.crosswalk_count):
        s = (i + 0.5) * step
        # keep the lead trigger ahead of the spawn point and off the corners
        while near_corner(s) or s < spec.trigger_lead + 2.0:
            s += 1.0
        cross_arcs.append(s % perimeter)
    cross_arcs.sort()

    route: list[RouteWaypoint] = []
    route_arcs = sorted(
        set(
            [float(c) for c in corner_arcs[:-1]]
            + [float(s) for s in np.arange(0.0, perimeter, 5.0)]
            + [float(s) for s in cross_arcs]
        )
    )
    cross_set = set(cross_arcs)

    def in_corner_zone(s):
        return any(
            abs(s - c) < spec.corner_zone or abs(s - c + perimeter) < spec.corner_zone
            or abs(s - c - perimeter) < spec.corner_zone
            for c in corner_arcs
        )

    for s in route_arcs:
        p, _ = _loop_point(corners, perimeter, s)
        speed = spec.corner_speed if in_corner_zone(s) else spec.cruise_speed
        route.append(RouteWaypoint((float(p[0]), float(p[1]), 0.0), speed, stop=s in cross_set))
    # close the loop
    p0, _ = _loop_point(corners, perimeter, 0.0)
    route.append(RouteWaypoint((float(p0[0]), float(p0[1]), 0.0), spec.corner_speed))

    triggers, agents, bindings = [], [], []
    for i, s in enumerate(cross_arcs):
        p, d = _loop_point(corners, perimeter, s)
        n = np.array([-d[1], d[0]])
        lead, _ = _loop_point(corners, perimeter, s - spec.trigger_lead)
        trig_id, ped_id = f"crosswalk{i:02d}", f"ped{i:02d}"
        half = (
            abs(d[0]) * 0.75 + abs(n[0]) * (spec.road_half_width + 1.0),
            abs(d[1]) * 0.75 + abs(n[1]) * (spec.road_half_width + 1.0),
            2.0,
        )
        triggers.append(TriggerVolume(trig_id, BoxVolume((float(lead[0]), float(lead[1]), 1.0), half)))
        start = p + (spec.road_half_width + 1.5) * n
        end = p - (spec.road_half_width + 1.5) * n
        agents.append(
            VirtualAgent(
                ped_id,
                "pedestrian",
                RigidTransform.from_yaw(
                    math.atan2(end[1] - start[1], end[0] - start[0]),
                    (float(start[0]), float(start[1]), 0.0),
                ),
                path=(PathLeg((float(end[0]), float(end[1]), 0.0), 1.4),),
            )
        )
        bindings.append(TriggerBinding(trig_id, (EventAction("start_agent", agent_id=ped_id),)))
        clouds.append(post(start))
        clouds.append(post(end))

    pc_map = PointCloudMap.from_cloud(PointCloud(np.concatenate(clouds)))
    scenario = Scenario(
        map_ref="synthetic://demo",
        agents=tuple(agents),
        triggers=tuple(triggers),
        bindings=tuple(bindings),
        route=tuple(route),
        map_hash=pc_map.digest,
    )

    truth_log = run_sim(scenario, follower, dt=sim_dt)
    world = SyntheticWorld(map=pc_map, ground_truth=truth_log.poses, generator_seed=spec.seed)
    return world, scenario


def _offset_rectangle(corners: np.ndarray, offset: float) -> np.ndarray | None:
    lo = corners.min(axis=0) - offset
    hi = corners.max(axis=0) + offset
    if np.any(hi <= lo):
        return None
    return np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])


# ---------------------------------------------------------------------------
# scan synthesis


def synthesize_scans(
    world: SyntheticWorld,
    model: SensorModel | None = None,
    seed: int | None = None,
) -> list[tuple[Timestamp, PointCloud]]:
    """Vehicle-frame scans along the ground-truth trajectory, rate_hz apart.

    Scan stamps cover the half-open trajectory window, so doubling the rate
    exactly doubles the scan count.  Deterministic: per-scan noise and
    subsampling derive from (seed, index).
    """
    model = model or SensorModel()
    seed = world.generator_seed if seed is None else seed
    traj = world.ground_truth
    if len(traj) < 2:
        raise ValueError("trajectory too short to scan")
    t0, t_end = traj[0][0], traj[-1][0]
    cadence = traj[1][0] - traj[0][0]
    period = int(round(1e9 / model.rate_hz))
    map_pts = world.map.cloud.points

    out: list[tuple[Timestamp, PointCloud]] = []
    for stamp in range(t0, t_end, period):
        k = min(int(round((stamp - t0) / cadence)), len(traj) - 1)
        pose = traj[k][1]
        rng = np.random.default_rng([seed, len(out)])
        if model.mode == "map-sample":
            scan_pts = _sample_visible(map_pts, pose, model, rng)
        else:
            scan_pts = _raycast(world.map, pose, model)
        if model.noise_sigma > 0:
            scan_pts = scan_pts + rng.normal(0.0, model.noise_sigma, scan_pts.shape)
        out.append((traj[k][0], PointCloud(scan_pts, frame="vehicle")))
    return out


def _sample_visible(map_pts: np.ndarray, pose: RigidTransform, model: SensorModel, rng) -> np.ndarray:
    rel = map_pts - pose.translation
    mask = np.einsum("ij,ij->i", rel, rel) <= model.max_range**2
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise ValueError("sensor pose sees no map points")
    if len(idx) > model.points_per_scan:
        idx = rng.choice(idx, size=model.points_per_scan, replace=False)
        idx.sort()
    return pose.inverse().apply(map_pts[idx])


def _raycast(pc_map: PointCloudMap, pose: RigidTransform, model: SensorModel,
             step: float = 0.5, hit_radius: float = 0.35) -> np.ndarray:
    """Coarse ray marching against the point cloud as a surface stand-in."""
    n_az = max(8, int(math.sqrt(model.points_per_scan) * 4))
    n_el = max(2, model.points_per_scan // n_az)
    az = np.linspace(-math.pi, math.pi, n_az, endpoint=False)
    el = np.linspace(-0.35, 0.15, n_el)
    azg, elg = np.meshgrid(az, el)
    dirs = np.c_[
        (np.cos(elg) * np.cos(azg)).ravel(),
        (np.cos(elg) * np.sin(azg)).ravel(),
        np.sin(elg).ravel(),
    ]
    origin_h = pose.translation + np.array([0.0, 0.0, 1.5])
    world_dirs = (pose.matrix()[:3, :3] @ dirs.T).T
    alive = np.arange(len(world_dirs))
    hits = []
    for r in np.arange(1.0, model.max_range, step):
        probes = origin_h + r * world_dirs[alive]
        d, idx = pc_map.index.nearest_batch(probes, hit_radius)
        found = np.isfinite(d)
        if np.any(found):
            hits.append(pc_map.index.points[idx[found]])
            alive = alive[~found]
        if len(alive) == 0:
            break
    if not hits:
        raise ValueError("raycast found no surfaces")
    pts = np.vstack(hits)
    return pose.inverse().apply(pts)


# ---------------------------------------------------------------------------
# disturbances


def inject_trajectory(
    trajectory: list[tuple[Timestamp, RigidTransform]],
    disturbances: list[Disturbance],
) -> list[tuple[Timestamp, RigidTransform]]:
    """Apply pause disturbances: the vehicle waits, later stamps shift."""
    out = list(trajectory)
    for d in disturbances:
        if d.kind != "pause":
            continue
        start_ns = sec_to_nanos(d.start)
        dur_ns = sec_to_nanos(d.duration)
        if not out:
            continue
        cadence = out[1][0] - out[0][0] if len(out) > 1 else sec_to_nanos(0.02)
        before = [(t, p) for t, p in out if t < start_ns]
        after = [(t + dur_ns, p) for t, p in out if t >= start_ns]
        hold_pose = before[-1][1] if before else out[0][1]
        hold = [
            (t, hold_pose)
            for t in range(start_ns, start_ns + dur_ns, cadence)
        ]
        out = before + hold + after
    return out


def inject_scans(
    scans: list[tuple[Timestamp, PointCloud]],
    disturbances: list[Disturbance],
    seed: int = 0,
) -> list[tuple[Timestamp, PointCloud]]:
    """Apply scan-dropout and clutter disturbances to a scan stream."""
    out = scans
    for d in disturbances:
        if d.kind == "scan-dropout":
            lo, hi = sec_to_nanos(d.start), sec_to_nanos(d.start + d.duration)
            out = [(t, c) for t, c in out if not (lo <= t < hi)]
        elif d.kind == "clutter":
            lo, hi = sec_to_nanos(d.start), sec_to_nanos(d.start + d.duration)
            patched = []
            for i, (t, c) in enumerate(out):
                if lo <= t < hi and d.count > 0:
                    rng = np.random.default_rng([seed, 7331, i])
                    extra = rng.uniform(-d.radius, d.radius, (d.count, 3))
                    extra = extra[np.linalg.norm(extra, axis=1) <= d.radius]
                    patched.append((t, PointCloud(np.vstack([c.points, extra]), frame=c.frame)))
                else:
                    patched.append((t, c))
            out = patched
    return out


# ---------------------------------------------------------------------------
# on-road twin: replay


def run_replay(
    scenario: Scenario,
    scans: list[tuple[Timestamp, PointCloud]],
    initial_pose: RigidTransform,
    pc_map: PointCloudMap,
    icp: IcpConfig | None = None,
    tick_hz: float = 50.0,
    on_tick=None,
) -> RunLog:
    """Localize the scan stream and run the scenario off the estimated pose.

    Triggers are evaluated at ``tick_hz`` between scan updates using the
    constant-velocity prediction, mirroring how a renderer would interpolate.
    Raises :class:`InitializationFailed` when the first scan does not align
    at ``initial_pose``.
    """
    if not scans:
        raise ValueError("no scans to replay")
    run = ScenarioRun(scenario)
    log = RunLog(
        mode="replay",
        scenario_hash=scenario.digest(),
        config={"tick_hz": tick_hz, "icp": asdict(icp) if icp else asdict(IcpConfig())},
    )
    loc = Localizer(pc_map.index, icp)
    first_stamp, first_scan = scans[0]
    loc.initialize(initial_pose, stamp=first_stamp, scan=first_scan)

    dt = 1.0 / tick_hz
    period = sec_to_nanos(dt)
    tick_stamp = first_stamp
    sample_every = max(1, int(round(tick_hz)))
    tick_count = 0

    def do_tick(stamp: Timestamp, pose: RigidTransform):
        nonlocal tick_count
        tick_count += 1
        events = run.trigger_step(pose, stamp)
        run.agent_step(dt)
        log.poses.append((stamp, pose))
        log.events.extend(events)
        if tick_count % sample_every == 0 or events:
            log.agent_samples.append((stamp, run.agent_snapshot()))
        if on_tick is not None:
            on_tick(stamp, pose, run, events)

    expected_gap = scans[1][0] - scans[0][0] if len(scans) > 1 else period
    prev_stamp = None
    try:
        for stamp, scan in scans:
            if prev_stamp is not None and stamp - prev_stamp > 2 * expected_gap:
                log.notes.append(
                    f"scan gap {nanos_to_sec(stamp - prev_stamp):.2f}s ending at t={nanos_to_sec(stamp):.2f}s"
                )
            prev_stamp = stamp
            while tick_stamp < stamp:
                do_tick(tick_stamp, predict(loc.state, tick_stamp))
                tick_stamp += period
            est = loc.update(scan, stamp)
            log.estimates.append(est)
            if not est.converged:
                log.notes.append(f"unconverged estimate at t={nanos_to_sec(stamp):.2f}s")
            if tick_stamp == stamp:
                do_tick(tick_stamp, est.map_to_vehicle)
                tick_stamp += period
    except StopRun as e:
        log.notes.append(f"stopped early: {e}")
    return log


# ---------------------------------------------------------------------------
# run comparison


@dataclass
class TriggerMatch:
    trigger_id: str
    position_distance: float
    time_offset: float
    agent_divergence: float


@dataclass
class TwinningReport:
    scenario_hash: str
    mode_a: str
    mode_b: str
    sequence_equal: bool
    trigger_ids_a: list[str]
    trigger_ids_b: list[str]
    matches: list[TriggerMatch]

    @property
    def max_position_distance(self) -> float:
        return max((m.position_distance for m in self.matches), default=0.0)

    @property
    def max_abs_time_offset(self) -> float:
        return max((abs(m.time_offset) for m in self.matches), default=0.0)

    def to_json(self) -> dict:
        return {
            "scenario_hash": self.scenario_hash,
            "mode_a": self.mode_a,
            "mode_b": self.mode_b,
            "sequence_equal": self.sequence_equal,
            "trigger_ids_a": self.trigger_ids_a,
            "trigger_ids_b": self.trigger_ids_b,
            "matches": [asdict(m) for m in self.matches],
            "max_position_distance_m": self.max_position_distance,
            "max_abs_time_offset_s": self.max_abs_time_offset,
        }


def compare_runs(a: RunLog, b: RunLog) -> TwinningReport:
    """Trigger-sequence and firing-geometry comparison of two runs.

    Firing positions are compared in the map frame; time offsets are reported
    but deliberately never judged, since platforms legitimately disagree on
    timing.
    """
    if a.scenario_hash != b.scenario_hash:
        raise ScenarioMismatch(f"{a.scenario_hash[:12]} vs {b.scenario_hash[:12]}")
    ids_a, ids_b = a.trigger_ids, b.trigger_ids
    matches = []
    for ea, eb in zip(a.events, b.events):
        if ea.trigger_id != eb.trigger_id:
            break
        div = 0.0
        shared = set(ea.agent_positions) & set(eb.agent_positions)
        for aid in shared:
            div = max(div, float(np.linalg.norm(
                np.asarray(ea.agent_positions[aid]) - np.asarray(eb.agent_positions[aid]))))
        matches.append(
            TriggerMatch(
                trigger_id=ea.trigger_id,
                position_distance=float(
                    np.linalg.norm(
                        ea.vehicle_pose_at_fire.translation - eb.vehicle_pose_at_fire.translation
                    )
                ),
                time_offset=nanos_to_sec(eb.stamp - ea.stamp),
                agent_divergence=div,
            )
        )
    return TwinningReport(
        scenario_hash=a.scenario_hash,
        mode_a=a.mode,
        mode_b=b.mode,
        sequence_equal=ids_a == ids_b,
        trigger_ids_a=ids_a,
        trigger_ids_b=ids_b,
        matches=matches,
    )


# ---------------------------------------------------------------------------
# run log files (newline-delimited JSON)


def write_runlog(log: RunLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({
            "type": "header",
            "mode": log.mode,
            "scenario_hash": log.scenario_hash,
            "seeds": log.seeds,
            "config": log.config,
            "disturbances": [d.to_json() for d in log.disturbances],
            "notes": log.notes,
        }, sort_keys=True) + "\n")
        for stamp, pose in log.poses:
            fh.write(json.dumps({"type": "pose", "t": stamp, "pose": pose.to_json()}) + "\n")
        for est in log.estimates:
            fh.write(json.dumps({
                "type": "estimate",
                "t": est.stamp,
                "pose": est.map_to_vehicle.to_json(),
                "fitness": est.fitness if math.isfinite(est.fitness) else None,
                "iterations": est.iterations_used,
                "converged": est.converged,
            }) + "\n")
        for e in log.events:
            fh.write(json.dumps({
                "type": "trigger",
                "t": e.stamp,
                "id": e.trigger_id,
                "pose": e.vehicle_pose_at_fire.to_json(),
                "actions": [a.kind for a in e.actions_executed],
                "agents": {k: [float(x) for x in v] for k, v in e.agent_positions.items()},
            }) + "\n")
        for stamp, snapshot in log.agent_samples:
            fh.write(json.dumps({
                "type": "agents",
                "t": stamp,
                "agents": {
                    k: {"pos": [float(x) for x in v["position"]], "yaw": v["yaw"],
                        "active": v["active"], "started": v["started"]}
                    for k, v in snapshot.items()
                },
            }) + "\n")


def read_runlog(path) -> RunLog:
    log: RunLog | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            kind = rec.get("type")
            if kind == "header":
                log = RunLog(
                    mode=rec["mode"],
                    scenario_hash=rec["scenario_hash"],
                    seeds=rec.get("seeds", {}),
                    config=rec.get("config", {}),
                    notes=rec.get("notes", []),
                    disturbances=[Disturbance(**d) for d in rec.get("disturbances", [])],
                )
            elif log is None:
                raise ValueError(f"{path}:{line_no}: record before header")
            elif kind == "pose":
                log.poses.append((rec["t"], RigidTransform.from_json(rec["pose"])))
            elif kind == "estimate":
                log.estimates.append(
                    PoseEstimate(
                        rec["t"],
                        RigidTransform.from_json(rec["pose"]),
                        rec["fitness"] if rec["fitness"] is not None else math.inf,
                        rec["iterations"],
                        rec["converged"],
                    )
                )
            elif kind == "trigger":
                log.events.append(
                    TriggerEvent(
                        stamp=rec["t"],
                        trigger_id=rec["id"],
                        vehicle_pose_at_fire=RigidTransform.from_json(rec["pose"]),
                        actions_executed=tuple(EventAction(k) for k in rec["actions"]),
                        agent_positions={k: np.asarray(v) for k, v in rec["agents"].items()},
                    )
                )
            elif kind == "agents":
                log.agent_samples.append((rec["t"], rec["agents"]))
    if log is None:
        raise ValueError(f"{path}: empty run log")
    return log
