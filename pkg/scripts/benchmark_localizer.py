#!/usr/bin/env python3
"""Measure localizer throughput and accuracy across world sizes and noise levels.

    python scripts/benchmark_localizer.py --route-length 200 --noise 0.02
"""

import argparse
import json
import math
import pathlib
import sys
import time

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from portobello.harness import SensorModel, WorldSpec, synthesize_scans, synthesize_world
from portobello.localization import Localizer


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--route-length", type=float, default=200.0)
    ap.add_argument("--crosswalks", type=int, default=15)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise", type=float, default=0.02)
    ap.add_argument("--updates", type=int, default=200, help="how many updates to time")
    args = ap.parse_args()

    spec = WorldSpec(route_length=args.route_length, crosswalk_count=args.crosswalks, seed=args.seed)
    world, _ = synthesize_world(spec)
    scans = synthesize_scans(world, SensorModel(noise_sigma=args.noise))
    truth = dict(world.ground_truth)

    loc = Localizer(world.map.index)
    loc.initialize(world.ground_truth[0][1], stamp=scans[0][0], scan=scans[0][1])

    times, sq = [], []
    for stamp, scan in scans[1 : args.updates + 1]:
        t0 = time.perf_counter()
        est = loc.update(scan, stamp)
        times.append(time.perf_counter() - t0)
        if stamp in truth:
            sq.append(float(np.sum((est.map_to_vehicle.translation - truth[stamp].translation) ** 2)))

    print(json.dumps({
        "map_points": len(world.map.cloud),
        "scan_points": len(scans[0][1]),
        "updates": len(times),
        "mean_update_ms": 1000 * float(np.mean(times)),
        "p95_update_ms": 1000 * float(np.percentile(times, 95)),
        "rmse_m": math.sqrt(float(np.mean(sq))),
        "max_err_m": math.sqrt(float(np.max(sq))),
    }, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
