#!/usr/bin/env python3
"""Materialize the demo world as files: map, scenario, scans, ground truth.

Produces everything the CLI workflows need:

    python scripts/make_demo_world.py --out demo/ --route-length 200 --crosswalks 15

then e.g.

    portobello run --scenario demo/scenario.json --map demo/map.pmap --mode sim --log sim.ndjson
    portobello run --scenario demo/scenario.json --map demo/map.pmap --mode replay \
        --scans demo/scans.pscans --log replay.ndjson
    portobello twin-report --a sim.ndjson --b replay.ndjson
"""

import argparse
import json
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from portobello.harness import SensorModel, WorldSpec, synthesize_scans, synthesize_world
from portobello.pointcloud import save_cloud, save_scans
from portobello.scenario import serialize_scenario


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="demo", help="output directory")
    ap.add_argument("--route-length", type=float, default=200.0)
    ap.add_argument("--crosswalks", type=int, default=15)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise", type=float, default=0.02, help="scan noise sigma (m)")
    ap.add_argument("--rate", type=float, default=10.0, help="scan rate (Hz)")
    args = ap.parse_args()

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    spec = WorldSpec(route_length=args.route_length, crosswalk_count=args.crosswalks, seed=args.seed)
    world, scenario = synthesize_world(spec)
    save_cloud(world.map.cloud, out / "map.pmap")

    scenario_path = out / "scenario.json"
    scenario_path.write_text(serialize_scenario(scenario))

    scans = synthesize_scans(world, SensorModel(noise_sigma=args.noise, rate_hz=args.rate))
    save_scans(scans, out / "scans.pscans")

    gt = [{"t": t, "pose": p.to_json()} for t, p in world.ground_truth]
    (out / "ground_truth.json").write_text(json.dumps(gt))

    start = world.ground_truth[0][1]
    print(json.dumps({
        "map": str(out / "map.pmap"),
        "map_points": len(world.map.cloud),
        "scenario": str(scenario_path),
        "triggers": len(scenario.triggers),
        "scans": str(out / "scans.pscans"),
        "scan_count": len(scans),
        "duration_s": world.ground_truth[-1][0] / 1e9,
        "init_pose": f"{start.translation[0]} {start.translation[1]} {start.translation[2]} {start.yaw()}",
    }))
    return 0


if __name__ == "__main__":
    sys.exit(main())
