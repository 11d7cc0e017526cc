"""HTTP console backend: staging edits, run control, live event stream.

Serves the browser console over plain HTTP (see API.md):

* ``GET /map`` — downsampled map points as chunked JSON
* ``GET/PUT /scenario`` — staged scenario document, strict-validated on PUT
* ``GET/POST /run`` — run status / operator commands (start, pause, resume,
  proceed)
* ``GET /events`` — server-sent events: status, pose, agents, trigger,
  heartbeat

The run loop executes in a worker thread paced to wall clock; operator
commands go through a queue and apply at tick boundaries.  Stop waypoints
hold until an operator ``proceed`` (the run is operator-attached here, unlike
batch sim runs which hold for a fixed time).
"""

from __future__ import annotations

import json
import queue
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .bridge import BindError, BridgeServer, TelemetrySnapshot, TriggerFired
from .harness import RouteUnreachable, SimEngine, WaypointFollower
from .pointcloud import PointCloud, PointCloudMap, voxel_downsample
from .scenario import (
    DanglingReference,
    Scenario,
    SchemaError,
    parse_scenario,
    serialize_scenario,
    validate_against_map,
)

DEFAULT_MAP_VOXEL = 0.5


class RunController:
    """Owns the live run; everything mutating goes through the command queue."""

    def __init__(self, scenario: Scenario, follower: WaypointFollower | None = None,
                 dt: float = 0.02, publish_hz: float = 10.0, realtime: bool = True,
                 bridge: BridgeServer | None = None):
        self.scenario = scenario
        self.follower = follower
        self.dt = dt
        self.publish_hz = publish_hz
        self.realtime = realtime
        self.bridge = bridge
        self.commands: queue.Queue[str] = queue.Queue()
        self.listeners: list[queue.Queue] = []
        self.listeners_lock = threading.Lock()
        self.state_lock = threading.Lock()
        self.engine: SimEngine | None = None
        self.thread: threading.Thread | None = None
        self.stop_flag = threading.Event()
        self.status = "idle"
        self.last_snapshot: dict = {"status": "idle"}
        self.fired: list[dict] = []
        self.error: str | None = None

    # -- command intake (HTTP thread)

    def command(self, cmd: str) -> tuple[bool, str]:
        if cmd == "start":
            with self.state_lock:
                if self.thread is not None and self.thread.is_alive():
                    return False, f"run already {self.status}"
                self.engine = SimEngine(self.scenario, self.follower, self.dt, hold_mode="operator")
                self.status = "running"
                self.fired = []
                self.error = None
                self.stop_flag.clear()
                self.thread = threading.Thread(target=self._loop, name="run-loop", daemon=True)
                self.thread.start()
            return True, "running"
        if cmd in ("pause", "resume", "proceed"):
            with self.state_lock:
                if self.engine is None or self.status in ("idle", "finished", "failed"):
                    return False, f"no active run (status {self.status})"
                if cmd == "proceed" and self.status != "holding-at-stop":
                    return False, f"proceed rejected: vehicle is {self.status}, not holding"
            self.commands.put(cmd)
            return True, "accepted"
        if cmd == "stop":
            self.stop_flag.set()
            return True, "stopping"
        return False, f"unknown command {cmd!r}"

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue(maxsize=1000)
        with self.listeners_lock:
            self.listeners.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self.listeners_lock:
            if q in self.listeners:
                self.listeners.remove(q)

    def _emit(self, kind: str, payload: dict) -> None:
        with self.listeners_lock:
            targets = list(self.listeners)
        for q in targets:
            try:
                q.put_nowait((kind, payload))
            except queue.Full:
                pass  # slow SSE consumer skips events; status resyncs on reconnect

    # -- run loop (worker thread)

    def _loop(self) -> None:
        engine = self.engine
        publish_period = 1.0 / self.publish_hz
        next_publish = 0.0
        anchor = time.monotonic() - engine.time
        heartbeat_at = 0.0
        try:
            while not engine.finished and not self.stop_flag.is_set():
                while True:
                    try:
                        cmd = self.commands.get_nowait()
                    except queue.Empty:
                        break
                    if cmd == "pause":
                        engine.pause()
                        anchor = None  # wall clock keeps moving; re-anchor on resume
                    elif cmd == "resume":
                        engine.resume()
                    elif cmd == "proceed":
                        engine.proceed()
                if engine.paused:
                    if self.status != "paused":
                        self.status = "paused"
                        self._emit("status", self.run_status())
                    time.sleep(0.02)
                    continue
                events = engine.tick()
                new_status = engine.status()
                if new_status != self.status:
                    self.status = new_status
                    self._emit("status", self.run_status())
                for e in events:
                    rec = {
                        "id": e.trigger_id,
                        "t": e.stamp,
                        "pose": e.vehicle_pose_at_fire.to_json(),
                    }
                    self.fired.append(rec)
                    self._emit("trigger", rec)
                    if self.bridge is not None:
                        self.bridge.publish_event(
                            TriggerFired(e.trigger_id, e.stamp, e.vehicle_pose_at_fire)
                        )
                if engine.time >= next_publish:
                    next_publish = engine.time + publish_period
                    snap = self._snapshot(engine)
                    self.last_snapshot = snap
                    self._emit("pose", {"t": engine.stamp, "pose": snap["pose"]})
                    self._emit("agents", {"t": engine.stamp, "agents": snap["agents"]})
                    if self.bridge is not None:
                        visible = engine.run.visible_agents(engine.pose)
                        self.bridge.publish_snapshot(
                            TelemetrySnapshot(
                                stamp=engine.stamp,
                                vehicle_pose=engine.pose,
                                agents=tuple(
                                    (aid, st.pose, aid in visible)
                                    for aid, st in engine.run.agents.items()
                                    if st.active
                                ),
                            )
                        )
                if engine.time - heartbeat_at >= 1.0:
                    heartbeat_at = engine.time
                    self._emit("heartbeat", {"t": engine.stamp, "status": self.status})
                if self.realtime:
                    if anchor is None:  # re-anchor after a pause
                        anchor = time.monotonic() - engine.time
                    lag = anchor + engine.time - time.monotonic()
                    if lag > 0:
                        time.sleep(lag)
            self.status = "finished" if engine.finished else "stopped"
        except RouteUnreachable as e:
            self.status = "failed"
            self.error = str(e)
        self._emit("status", self.run_status())

    def _snapshot(self, engine: SimEngine) -> dict:
        visible = engine.run.visible_agents(engine.pose)
        return {
            "status": self.status,
            "t": engine.stamp,
            "pose": engine.pose.to_json(),
            "speed": engine.speed,
            "agents": {
                aid: {
                    "pos": [float(x) for x in st.position],
                    "yaw": st.yaw,
                    "active": st.active,
                    "visible": aid in visible,
                }
                for aid, st in engine.run.agents.items()
            },
        }

    def run_status(self) -> dict:
        engine = self.engine
        out = {
            "status": self.status,
            "fired": [f["id"] for f in self.fired],
            "events": self.fired,
            "error": self.error,
        }
        if engine is not None:
            out.update(self._snapshot(engine))
            out["status"] = self.status
            out["armed"] = engine.run.trigger_snapshot()
        return out


@dataclass
class ConsoleApp:
    pc_map: PointCloudMap
    scenario_path: str
    controller: RunController
    map_voxel: float = DEFAULT_MAP_VOXEL

    def load_scenario_text(self) -> str:
        with open(self.scenario_path, "r", encoding="utf-8") as fh:
            return fh.read()


def make_handler(app: ConsoleApp):
    reduced = voxel_downsample(app.pc_map.cloud, app.map_voxel)

    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet; diagnostics go to stderr elsewhere
            pass

        # -- helpers

        def send_json(self, obj, code=200):
            body = json.dumps(obj).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def send_chunk(self, data: bytes):
            self.wfile.write(f"{len(data):X}\r\n".encode() + data + b"\r\n")

        # -- routes

        def do_GET(self):
            url = urlparse(self.path)
            if url.path == "/map":
                return self.get_map(parse_qs(url.query))
            if url.path == "/scenario":
                return self.get_scenario()
            if url.path == "/run":
                return self.send_json(app.controller.run_status())
            if url.path == "/events":
                return self.get_events()
            self.send_json({"error": "not found"}, 404)

        def do_PUT(self):
            if urlparse(self.path).path != "/scenario":
                return self.send_json({"error": "not found"}, 404)
            length = int(self.headers.get("Content-Length", 0))
            body = self.rfile.read(length).decode("utf-8")
            try:
                scenario = parse_scenario(body)
            except (SchemaError, DanglingReference) as e:
                return self.send_json({"ok": False, "error": str(e)}, 422)
            issues = validate_against_map(scenario, app.pc_map)
            errors = [i for i in issues if i.severity == "error"]
            payload = {
                "ok": not errors,
                "issues": [
                    {"severity": i.severity, "code": i.code, "entity": i.entity, "message": i.message}
                    for i in issues
                ],
            }
            if errors:
                return self.send_json(payload, 422)
            text = serialize_scenario(scenario)
            with open(app.scenario_path, "w", encoding="utf-8") as fh:
                fh.write(text)
            app.controller.scenario = scenario
            payload["hash"] = scenario.digest()
            return self.send_json(payload)

        def do_POST(self):
            if urlparse(self.path).path != "/run":
                return self.send_json({"error": "not found"}, 404)
            length = int(self.headers.get("Content-Length", 0))
            try:
                body = json.loads(self.rfile.read(length) or b"{}")
                cmd = body["command"]
            except (json.JSONDecodeError, KeyError):
                return self.send_json({"ok": False, "error": "body must be {\"command\": ...}"}, 400)
            ok, detail = app.controller.command(cmd)
            status = app.controller.run_status()
            code = 200 if ok else 409
            return self.send_json({"ok": ok, "detail": detail, "status": status["status"]}, code)

        def get_map(self, query):
            if query.get("meta"):
                return self.send_json({"count": len(reduced), "voxel": app.map_voxel,
                                       "source_count": len(app.pc_map.cloud)})
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Transfer-Encoding", "chunked")
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            head = json.dumps({"count": len(reduced), "voxel": app.map_voxel})[:-1]
            self.send_chunk((head + ', "points": [').encode())
            pts = reduced.points
            for off in range(0, len(pts), 2048):
                block = pts[off : off + 2048]
                text = ",".join(
                    f"[{p[0]:.3f},{p[1]:.3f},{p[2]:.3f}]" for p in block
                )
                if off > 0:
                    text = "," + text
                self.send_chunk(text.encode())
            self.send_chunk(b"]}")
            self.send_chunk(b"")

        def get_scenario(self):
            try:
                text = app.load_scenario_text()
            except FileNotFoundError:
                return self.send_json({"error": "no scenario staged"}, 404)
            body = text.encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            self.wfile.write(body)

        def get_events(self):
            q = app.controller.subscribe()
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Access-Control-Allow-Origin", "*")
            self.end_headers()
            try:
                # opening snapshot lets reconnecting consoles resync missed state
                self.write_event("status", app.controller.run_status())
                while True:
                    try:
                        kind, payload = q.get(timeout=2.0)
                    except queue.Empty:
                        self.write_event("heartbeat", {"t": None, "status": app.controller.status})
                        continue
                    self.write_event(kind, payload)
            except (BrokenPipeError, ConnectionResetError, OSError):
                pass
            finally:
                app.controller.unsubscribe(q)

        def write_event(self, kind: str, payload: dict):
            data = f"event: {kind}\ndata: {json.dumps(payload)}\n\n".encode("utf-8")
            self.wfile.write(data)
            self.wfile.flush()

    return Handler


class _HttpServer(ThreadingHTTPServer):
    daemon_threads = True  # SSE handlers must not block interpreter exit


class ConsoleServer:
    def __init__(self, app: ConsoleApp, host: str = "127.0.0.1", port: int = 8080):
        self.app = app
        try:
            self.httpd = _HttpServer((host, port), make_handler(app))
        except OSError as e:
            raise BindError(f"cannot bind http {host}:{port}: {e}")
        self.port = self.httpd.server_address[1]
        self.thread: threading.Thread | None = None

    def start(self) -> None:
        self.thread = threading.Thread(target=self.httpd.serve_forever, name="http", daemon=True)
        self.thread.start()

    def stop(self) -> None:
        self.app.controller.stop_flag.set()
        self.httpd.shutdown()
        self.httpd.server_close()
        if self.thread is not None:
            self.thread.join(timeout=2.0)

    def __enter__(self):
        self.start()
        return self

    def __exit__(self, *exc):
        self.stop()
