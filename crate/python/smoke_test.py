#!/usr/bin/env python3
"""Smoke test for the conestack_py extension module.

Builds nothing itself: expects `cargo build -p conestack-py` (or --release)
to have produced the cdylib. Copies the library into a temp directory under
the importable module name, then drives a short scenario end to end.
"""

import json
import math
import os
import shutil
import sys
import tempfile


def locate_extension():
    root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    names = ["libconestack_py.so", "conestack_py.dll", "libconestack_py.dylib"]
    candidates = []
    for profile in ("release", "debug"):
        for name in names:
            path = os.path.join(root, "target", profile, name)
            if os.path.exists(path):
                candidates.append(path)
    if not candidates:
        sys.exit(
            "extension not found; run `cargo build -p conestack-py` first "
            f"(searched target/{{release,debug}} under {root})"
        )
    return max(candidates, key=os.path.getmtime)


def main():
    src = locate_extension()
    tmp = tempfile.mkdtemp(prefix="conestack-py-")
    shutil.copy(src, os.path.join(tmp, "conestack_py.so"))
    sys.path.insert(0, tmp)
    import conestack_py as cs

    # Geometry primitives.
    assert cs.wrap_angle(3 * math.pi) == math.pi
    pose = cs.Pose2D(1.0, 2.0, math.pi / 2)
    wx, wy = pose.to_world(1.0, 0.0)
    assert abs(wx - 1.0) < 1e-12 and abs(wy - 3.0) < 1e-12
    bx, by = pose.to_body(wx, wy)
    assert abs(bx - 1.0) < 1e-12 and abs(by) < 1e-12
    ident = pose.compose(pose.inverse())
    assert abs(ident.x) < 1e-12 and abs(ident.theta) < 1e-12

    # Color classifier on a clean blue profile.
    probs = cs.classify_cone_color([0.2, 0.2, 0.8, 0.8, 0.2, 0.2], 100)
    assert probs[0] > 0.95, probs

    # Short closed-loop scenario through the full stack.
    config = """
seed = 5
duration_s = 8.0

[track]
mean_radius = 30.0

[slam]
n_particles = 30
"""
    track_json = cs.generate_track(5, config)
    track = json.loads(track_json)
    assert len(track["left_cones"]) > 10

    out = cs.simulate(config)
    assert out["real_time_factor"] > 1.0, out["real_time_factor"]
    log = out["log"]
    assert log.count("\n") > 1000

    # Replay fidelity through the bindings.
    replayed = cs.replay(log, config)
    assert replayed == log, "replayed log differs from the recorded log"

    report = json.loads(cs.evaluate(log, out["track"], config))
    assert report["velocity"]["vx_rmse"] < 0.15, report["velocity"]
    assert report["map"]["matched"] > 0

    csv = cs.stream_csv(log, "VEL_EST")
    assert csv.startswith("t,vx,vy,r,")

    print(
        "smoke test OK: rtf={:.1f}, vx_rmse={:.4f}, matched={} cones".format(
            out["real_time_factor"],
            report["velocity"]["vx_rmse"],
            report["map"]["matched"],
        )
    )


if __name__ == "__main__":
    main()
