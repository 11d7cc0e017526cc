"""Command-line entry point: map building, validation, runs, reports, serving.

Exit codes are part of the interface and stay stable:

    0   success
    2   malformed input file (FormatError)
    3   registration diverged during map building
    4   scenario validation errors
    5   localizer initialization failed
    6   route unreachable by the follower
    7   endpoint could not be bound
    8   twin report: trigger sequences differ
    9   twin report: runs come from different scenarios
    64  usage error

stdout carries machine-readable JSON only; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

import numpy as np

from .bridge import BindError, BridgeServer, TelemetrySnapshot, TriggerFired, resolve_port
from .frames import RigidTransform, nanos_to_sec
from .harness import (
    RouteUnreachable,
    ScenarioMismatch,
    StopRun,
    WaypointFollower,
    compare_runs,
    read_runlog,
    run_replay,
    run_sim,
    write_runlog,
)
from .localization import IcpConfig, InitializationFailed
from .pointcloud import (
    FormatError,
    MapBuildConfig,
    PointCloudMap,
    RegistrationDiverged,
    build_map,
    load_cloud,
    load_scans,
    save_cloud,
)
from .scenario import DanglingReference, SchemaError, parse_scenario, validate_against_map

EX_OK = 0
EX_FORMAT = 2
EX_DIVERGED = 3
EX_INVALID_SCENARIO = 4
EX_INIT_FAILED = 5
EX_ROUTE = 6
EX_BIND = 7
EX_SEQUENCE_DIFFERS = 8
EX_SCENARIO_MISMATCH = 9
EX_USAGE = 64

log = logging.getLogger("portobello")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _load_scenario_file(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_scenario(fh.read())
    except OSError as e:
        raise CliError(EX_USAGE, f"cannot read scenario: {e}")
    except (SchemaError, DanglingReference) as e:
        raise CliError(EX_INVALID_SCENARIO, f"invalid scenario: {e}")


def _load_map_file(path) -> PointCloudMap:
    try:
        return PointCloudMap.from_cloud(load_cloud(path))
    except OSError as e:
        raise CliError(EX_USAGE, f"cannot read map: {e}")
    except FormatError as e:
        raise CliError(EX_FORMAT, f"bad map file: {e}")


def cmd_map_build(args) -> int:
    try:
        scans = load_scans(args.scans)
    except OSError as e:
        raise CliError(EX_USAGE, f"cannot read scans: {e}")
    except FormatError as e:
        raise CliError(EX_FORMAT, f"bad scans file: {e}")
    cfg = MapBuildConfig(voxel_size=args.voxel, keyframe_distance=args.keyframe_dist)
    pairs = [(cloud, RigidTransform.identity()) for _, cloud in scans]
    try:
        built = build_map(pairs, cfg)
    except RegistrationDiverged as e:
        raise CliError(EX_DIVERGED, str(e))
    save_cloud(built.cloud, args.out)
    sidecar = str(args.out) + ".traj.json"
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump({
            "poses": [t.to_json() for t in built.trajectory],
            "keyframes": built.keyframe_indices,
        }, fh)
    print(json.dumps({
        "points": len(built.cloud),
        "keyframes": len(built.keyframe_indices),
        "scans": len(scans),
        "map": str(args.out),
        "trajectory": sidecar,
    }))
    return EX_OK


def cmd_scenario_validate(args) -> int:
    scenario = _load_scenario_file(args.scenario)
    pc_map = _load_map_file(args.map)
    issues = validate_against_map(scenario, pc_map)
    report = {
        "errors": [
            {"code": i.code, "entity": i.entity, "message": i.message}
            for i in issues if i.severity == "error"
        ],
        "warnings": [
            {"code": i.code, "entity": i.entity, "message": i.message}
            for i in issues if i.severity == "warning"
        ],
    }
    print(json.dumps(report))
    return EX_INVALID_SCENARIO if report["errors"] else EX_OK


def _parse_init_pose(text: str) -> RigidTransform:
    parts = text.split()
    if len(parts) != 4:
        raise CliError(EX_USAGE, 'expected --init-pose "x y z yaw"')
    try:
        x, y, z, yaw = (float(v) for v in parts)
    except ValueError:
        raise CliError(EX_USAGE, 'expected numeric --init-pose "x y z yaw"')
    return RigidTransform.from_yaw(yaw, (x, y, z))


def cmd_run(args) -> int:
    scenario = _load_scenario_file(args.scenario)
    pc_map = _load_map_file(args.map)
    if scenario.map_hash is not None and scenario.map_hash != pc_map.digest:
        log.warning("scenario was staged against a different map (hash mismatch)")

    bridge = None
    pacer = None
    if args.publish:
        bridge = BridgeServer(port=resolve_port(args.port), rate_hz=10.0,
                              map_points=pc_map.cloud.points[:: max(1, len(pc_map.cloud) // 20000)])
        try:
            bridge.start()
        except BindError as e:
            raise CliError(EX_BIND, str(e))
        log.info("bridge listening on port %d", bridge.port)
        if args.publish_wait > 0:
            time.sleep(args.publish_wait)
        pacer = _RealtimePacer()

    deadline = time.monotonic() + args.max_wall_seconds if args.max_wall_seconds else None

    def sim_tick(engine, events):
        if bridge is not None:
            visible = engine.run.visible_agents(engine.pose)
            bridge.publish_snapshot(TelemetrySnapshot(
                stamp=engine.stamp,
                vehicle_pose=engine.pose,
                agents=tuple((aid, st.pose, aid in visible)
                             for aid, st in engine.run.agents.items() if st.active),
            ))
            for e in events:
                bridge.publish_event(TriggerFired(e.trigger_id, e.stamp, e.vehicle_pose_at_fire))
        if pacer is not None:
            pacer.pace(nanos_to_sec(engine.stamp))
        if deadline is not None and time.monotonic() > deadline:
            raise StopRun("wall-clock limit")

    def replay_tick(stamp, pose, run, events):
        if bridge is not None:
            visible = run.visible_agents(pose)
            bridge.publish_snapshot(TelemetrySnapshot(
                stamp=stamp,
                vehicle_pose=pose,
                agents=tuple((aid, st.pose, aid in visible)
                             for aid, st in run.agents.items() if st.active),
            ))
            for e in events:
                bridge.publish_event(TriggerFired(e.trigger_id, e.stamp, e.vehicle_pose_at_fire))
        if pacer is not None:
            pacer.pace(nanos_to_sec(stamp))
        if deadline is not None and time.monotonic() > deadline:
            raise StopRun("wall-clock limit")

    if args.mode == "sim":
        try:
            runlog = run_sim(scenario, WaypointFollower(), on_tick=sim_tick)
        except RouteUnreachable as e:
            raise CliError(EX_ROUTE, str(e))
    else:
        if not args.scans:
            raise CliError(EX_USAGE, "--mode replay requires --scans")
        try:
            scans = load_scans(args.scans)
        except FormatError as e:
            raise CliError(EX_FORMAT, f"bad scans file: {e}")
        if args.init_pose:
            init = _parse_init_pose(args.init_pose)
        else:
            start = np.asarray(scenario.route[0].position) if scenario.route else np.zeros(3)
            init = RigidTransform(np.array([1.0, 0, 0, 0]), start)
        try:
            runlog = run_replay(scenario, scans, init, pc_map, IcpConfig(), on_tick=replay_tick)
        except InitializationFailed as e:
            failed = _failed_runlog(scenario, str(e))
            if args.log:
                write_runlog(failed, args.log)
            raise CliError(EX_INIT_FAILED, f"initialization failed: {e}")

    if bridge is not None:
        time.sleep(0.5)  # let final reliable events flush
        bridge.stop()
    if args.log:
        write_runlog(runlog, args.log)
    print(json.dumps({
        "mode": runlog.mode,
        "events": len(runlog.events),
        "trigger_ids": runlog.trigger_ids,
        "duration_s": nanos_to_sec(runlog.poses[-1][0]) if runlog.poses else 0.0,
        "log": str(args.log) if args.log else None,
        "notes": runlog.notes,
    }))
    return EX_OK


class _RealtimePacer:
    def __init__(self):
        self.anchor = None

    def pace(self, sim_time: float) -> None:
        if self.anchor is None:
            self.anchor = time.monotonic() - sim_time
        lag = self.anchor + sim_time - time.monotonic()
        if lag > 0:
            time.sleep(lag)


def _failed_runlog(scenario, note: str):
    from .harness import RunLog

    log_ = RunLog(mode="replay", scenario_hash=scenario.digest())
    log_.notes.append(f"initialization_failed: {note}")
    return log_


def cmd_twin_report(args) -> int:
    try:
        a = read_runlog(args.a)
        b = read_runlog(args.b)
    except OSError as e:
        raise CliError(EX_USAGE, f"cannot read run log: {e}")
    try:
        report = compare_runs(a, b)
    except ScenarioMismatch as e:
        raise CliError(EX_SCENARIO_MISMATCH, f"scenario mismatch: {e}")
    print(json.dumps(report.to_json()))
    if not report.sequence_equal:
        return EX_SEQUENCE_DIFFERS
    return EX_OK


def cmd_serve(args) -> int:
    from .httpapi import ConsoleApp, ConsoleServer, RunController

    scenario = _load_scenario_file(args.scenario)
    pc_map = _load_map_file(args.map)

    bridge = None
    if args.publish:
        bridge = BridgeServer(port=resolve_port(args.port), rate_hz=10.0)
        try:
            bridge.start()
        except BindError as e:
            raise CliError(EX_BIND, str(e))

    controller = RunController(scenario, bridge=bridge)
    app = ConsoleApp(pc_map=pc_map, scenario_path=args.scenario, controller=controller)
    try:
        server = ConsoleServer(app, port=args.http_port)
    except BindError as e:
        raise CliError(EX_BIND, str(e))
    server.start()
    print(json.dumps({"http_port": server.port, "bridge_port": bridge.port if bridge else None}),
          flush=True)
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        if bridge is not None:
            bridge.stop()
    return EX_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="portobello",
                                description="map-anchored scenario staging and twinned runs")
    p.add_argument("--seed", type=int, default=0, help="seed for anything stochastic")
    p.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    p.add_argument("--port", type=int, default=None, help="bridge TCP port (overrides PORTOBELLO_PORT)")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("map-build", help="register a scan file into a map")
    b.add_argument("--scans", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--voxel", type=float, default=0.2)
    b.add_argument("--keyframe-dist", type=float, default=1.0)
    b.set_defaults(fn=cmd_map_build)

    v = sub.add_parser("scenario-validate", help="check a scenario against a map")
    v.add_argument("--scenario", required=True)
    v.add_argument("--map", required=True)
    v.set_defaults(fn=cmd_scenario_validate)

    r = sub.add_parser("run", help="execute a scenario in sim or replay mode")
    r.add_argument("--scenario", required=True)
    r.add_argument("--map", required=True)
    r.add_argument("--mode", required=True, choices=["sim", "replay"])
    r.add_argument("--scans", default=None)
    r.add_argument("--init-pose", default=None, metavar='"x y z yaw"')
    r.add_argument("--publish", action="store_true", help="serve the TCP bridge while running (paces to wall clock)")
    r.add_argument("--publish-wait", type=float, default=0.0, help="seconds to wait for clients before starting")
    r.add_argument("--max-wall-seconds", type=float, default=0.0, help="stop the run after this much wall time")
    r.add_argument("--log", default=None, help="write the run log (NDJSON) here")
    r.set_defaults(fn=cmd_run)

    t = sub.add_parser("twin-report", help="compare two run logs")
    t.add_argument("--a", required=True)
    t.add_argument("--b", required=True)
    t.set_defaults(fn=cmd_twin_report)

    s = sub.add_parser("serve", help="serve the staging console (HTTP + event stream)")
    s.add_argument("--scenario", required=True)
    s.add_argument("--map", required=True)
    s.add_argument("--http-port", type=int, default=8080)
    s.add_argument("--publish", action="store_true", help="also serve the TCP bridge")
    s.set_defaults(fn=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage problems; the documented usage code is 64
        return EX_USAGE if e.code not in (0, None) else 0
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
