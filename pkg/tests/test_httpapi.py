import json
import threading
import time

import numpy as np
import pytest
import requests

from portobello.httpapi import ConsoleApp, ConsoleServer, RunController
from portobello.pointcloud import PointCloud, PointCloudMap, voxel_downsample
from portobello.scenario import (
    BoxVolume,
    EventAction,
    PathLeg,
    RouteWaypoint,
    Scenario,
    TriggerBinding,
    TriggerVolume,
    VirtualAgent,
    parse_scenario,
    serialize_scenario,
)
from portobello.frames import RigidTransform


def small_scenario():
    agent = VirtualAgent(
        "ped0", "pedestrian",
        RigidTransform.from_yaw(-np.pi / 2, (30.0, 6.0, 0.0)),
        path=(PathLeg((30.0, -6.0, 0.0), 1.4),),
    )
    trig = TriggerVolume("t0", BoxVolume((22.0, 0.0, 1.0), (1.0, 5.0, 2.0)))
    return Scenario(
        map_ref="m.pmap",
        agents=(agent,),
        triggers=(trig,),
        bindings=(TriggerBinding("t0", (EventAction("start_agent", agent_id="ped0"),)),),
        route=(
            RouteWaypoint((0.0, 0.0, 0.0), 5.0),
            RouteWaypoint((30.0, 0.0, 0.0), 5.0, stop=True),
            RouteWaypoint((60.0, 0.0, 0.0), 5.0),
        ),
    )


@pytest.fixture()
def console(tmp_path):
    rng = np.random.default_rng(0)
    pts = np.c_[rng.uniform(-10, 70, (20000, 2)), np.zeros(20000)]
    pc_map = PointCloudMap.from_cloud(PointCloud(pts))
    scenario = small_scenario()
    scenario_path = tmp_path / "scenario.json"
    scenario_path.write_text(serialize_scenario(scenario))
    controller = RunController(scenario, realtime=False)
    app = ConsoleApp(pc_map=pc_map, scenario_path=str(scenario_path), controller=controller)
    server = ConsoleServer(app, port=0)
    server.start()
    yield server, f"http://127.0.0.1:{server.port}", app
    server.stop()


def test_map_metadata_and_points(console):
    _, base, app = console
    meta = requests.get(f"{base}/map?meta=1", timeout=5).json()
    body = requests.get(f"{base}/map", timeout=15).json()
    assert body["count"] == meta["count"] == len(body["points"])
    want = voxel_downsample(app.pc_map.cloud, app.map_voxel)
    assert meta["count"] == len(want)


def test_scenario_get_put_roundtrip(console, tmp_path):
    _, base, app = console
    doc = requests.get(f"{base}/scenario", timeout=5).json()
    assert doc["portobello_scenario"] == 1

    # move the trigger and put it back
    doc["triggers"][0]["shape"]["center"] = [25.0, 0.0, 1.0]
    r = requests.put(f"{base}/scenario", json=doc, timeout=5)
    assert r.status_code == 200
    assert r.json()["ok"]
    back = requests.get(f"{base}/scenario", timeout=5).json()
    assert back["triggers"][0]["shape"]["center"] == [25.0, 0.0, 1.0]
    # persisted to disk as well
    on_disk = parse_scenario(open(app.scenario_path).read())
    assert on_disk.triggers[0].shape.center == (25.0, 0.0, 1.0)


def test_put_unknown_key_rejected_422(console):
    _, base, _ = console
    doc = requests.get(f"{base}/scenario", timeout=5).json()
    doc["mystery"] = True
    r = requests.put(f"{base}/scenario", json=doc, timeout=5)
    assert r.status_code == 422
    assert "mystery" in r.json()["error"]


def test_put_dangling_reference_rejected_422(console):
    _, base, _ = console
    doc = requests.get(f"{base}/scenario", timeout=5).json()
    doc["bindings"][0]["actions"][0]["agent_id"] = "ghost"
    r = requests.put(f"{base}/scenario", json=doc, timeout=5)
    assert r.status_code == 422
    assert "ghost" in r.json()["error"]


def test_put_out_of_map_entity_rejected_with_report(console):
    _, base, _ = console
    doc = requests.get(f"{base}/scenario", timeout=5).json()
    doc["agents"][0]["initial_pose"]["position"] = [500.0, 500.0, 0.0]
    r = requests.put(f"{base}/scenario", json=doc, timeout=5)
    assert r.status_code == 422
    issues = r.json()["issues"]
    assert any(i["code"] == "OutOfMap" and "ped0" in i["entity"] for i in issues)


def wait_for(predicate, timeout=20.0, interval=0.02):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        value = predicate()
        if value:
            return value
        time.sleep(interval)
    raise TimeoutError("condition not reached")


def test_run_lifecycle_with_operator_proceed(console):
    _, base, _ = console
    status = requests.get(f"{base}/run", timeout=5).json()
    assert status["status"] == "idle"

    # proceed before any run is an error the console can toast
    r = requests.post(f"{base}/run", json={"command": "proceed"}, timeout=5)
    assert r.status_code == 409

    r = requests.post(f"{base}/run", json={"command": "start"}, timeout=5)
    assert r.status_code == 200

    wait_for(lambda: requests.get(f"{base}/run", timeout=5).json()["status"] == "holding-at-stop")
    held = requests.get(f"{base}/run", timeout=5).json()
    assert held["fired"] == ["t0"]  # trigger sits before the stop line
    assert held["agents"]["ped0"]["active"]

    # proceed releases the hold and the run finishes
    r = requests.post(f"{base}/run", json={"command": "proceed"}, timeout=5)
    assert r.status_code == 200
    wait_for(lambda: requests.get(f"{base}/run", timeout=5).json()["status"] == "finished")


def test_pause_freezes_vehicle(console):
    _, base, _ = console
    requests.post(f"{base}/run", json={"command": "start"}, timeout=5)
    wait_for(lambda: requests.get(f"{base}/run", timeout=5).json().get("speed", 0) > 1.0)
    requests.post(f"{base}/run", json={"command": "pause"}, timeout=5)
    wait_for(lambda: requests.get(f"{base}/run", timeout=5).json()["status"] == "paused")
    p1 = requests.get(f"{base}/run", timeout=5).json()["pose"]["t"]
    time.sleep(0.2)
    p2 = requests.get(f"{base}/run", timeout=5).json()["pose"]["t"]
    assert p1 == p2
    requests.post(f"{base}/run", json={"command": "resume"}, timeout=5)
    wait_for(lambda: requests.get(f"{base}/run", timeout=5).json()["status"] != "paused")


def test_event_stream_delivers_trigger_and_status(console):
    _, base, _ = console
    events = []
    done = threading.Event()

    def listen():
        with requests.get(f"{base}/events", stream=True, timeout=30) as r:
            kind = None
            for line in r.iter_lines():
                line = line.decode()
                if line.startswith("event: "):
                    kind = line[len("event: "):]
                elif line.startswith("data: "):
                    events.append((kind, json.loads(line[len("data: "):])))
                    if kind == "status" and events[-1][1].get("status") == "finished":
                        done.set()
                        return

    t = threading.Thread(target=listen, daemon=True)
    t.start()
    time.sleep(0.3)
    requests.post(f"{base}/run", json={"command": "start"}, timeout=5)
    wait_for(lambda: requests.get(f"{base}/run", timeout=5).json()["status"] == "holding-at-stop")
    requests.post(f"{base}/run", json={"command": "proceed"}, timeout=5)
    assert done.wait(timeout=30)

    kinds = [k for k, _ in events]
    assert kinds[0] == "status"  # opening resync snapshot
    assert "trigger" in kinds
    assert "pose" in kinds
    trigger_events = [p for k, p in events if k == "trigger"]
    assert trigger_events[0]["id"] == "t0"


def test_reconnect_gets_current_state_snapshot(console):
    _, base, _ = console
    requests.post(f"{base}/run", json={"command": "start"}, timeout=5)
    wait_for(lambda: requests.get(f"{base}/run", timeout=5).json()["status"] == "holding-at-stop")
    # a late subscriber (reconnect) sees fired triggers in its opening snapshot
    with requests.get(f"{base}/events", stream=True, timeout=10) as r:
        it = r.iter_lines()
        kind = None
        for line in it:
            line = line.decode()
            if line.startswith("event: "):
                kind = line[len("event: "):]
            elif line.startswith("data: "):
                payload = json.loads(line[len("data: "):])
                assert kind == "status"
                assert payload["fired"] == ["t0"]
                break
