"""Offline walkthrough of the whole pipeline on the bundled desk-scale beam.

Runs the four stages back to back and prints what each one produced:

  1. map the tag stripes from the scripted camera sweep,
  2. register and lock the execution model onto that map,
  3. run the scripted operator session (drill, then two saw cuts) and
     replay its log into an as-built model,
  4. scan the virtual result and report the fabrication errors.

Everything is synthetic and deterministic; run it as
`python3 demos/guided_cut.py` from the repository root.
"""

import numpy as np

from beamguide.acim import lock, register_to_map
from beamguide.cli import mapping_frame_count, simulate_session
from beamguide.evaluate import (
    joint_face_error,
    joint_location_error,
    perforation_errors,
    sawing_angle_deg,
    segment_dowel,
    segment_joint,
    stats_csv,
    summarize,
    JointErrorReport,
)
from beamguide.fixtures import closure_model, closure_scenario, demo_intrinsics
from beamguide.geometry import rotation_angle_deg
from beamguide.mapping import build_map
from beamguide.session import EventKind, replay
from beamguide.simulate import make_scene, observe, synth_scan


def main() -> None:
    spec = closure_scenario()
    model = closure_model()
    intr = demo_intrinsics()
    scene, _truth = make_scene(spec)

    print("== 1. mapping")
    n_map = mapping_frame_count(spec)
    frames = [observe(scene, f, intr) for f in range(n_map)]
    tag_map = build_map(frames, intr, beam_id=spec.name)
    obb = tag_map.obb
    print(f"   {len(tag_map.tags)} tags from {n_map} frames, gauge #{tag_map.gauge_tag_id}")
    print(f"   map box extents (m): {np.round(2 * obb.half_extents, 4)}")

    print("== 2. registration")
    candidates = register_to_map(model, tag_map)
    angles = [f"{rotation_angle_deg(c.pose.q):7.2f}" for c in candidates]
    print(f"   {len(candidates)} candidates, rotations (deg): {' '.join(angles)}")
    print("   keeping the first (an operator would confirm on screen), locking")
    lock(model)

    print("== 3. scripted session and replay")
    log = simulate_session(spec, closure_model())
    greens = [
        e.payload["metrics"].get("all_green")
        for e in log.events
        if e.kind is EventKind.FEEDBACK_EMITTED
    ]
    print(f"   {len(log.events)} events, {len(greens)} feedback frames, "
          f"{sum(bool(g) for g in greens)} green")
    built, trajectory = replay(log)
    print(f"   as-built: {len(built.executed_cuts)} cut planes, "
          f"{len(built.executed_holes)} hole rays, {len(trajectory)} tool poses")

    print("== 4. scan and evaluate")
    scan = synth_scan(
        model, built, density=30000, sigma=0.0002, seed=1, dowel_density=4.0e5
    )
    print(f"   scan: {len(scan)} points at 0.2 mm noise")
    segment = segment_joint(scan, model, "lap1")
    loc_mm, correction = joint_location_error(segment, model, "lap1")
    joint = model.component("lap1")
    face_errors, face_angles = {}, {}
    for face in joint.faces:
        face_errors[face.face_id] = joint_face_error(segment, face, correction)
        face_angles[face.face_id] = sawing_angle_deg(face.plane.normal)
    hole = model.component("peg1")
    perf = perforation_errors(segment_dowel(scan, hole), hole)
    print(f"   joint location error: {loc_mm:.3f} mm")
    for fid, err in face_errors.items():
        print(f"   face {fid} ({face_angles[fid]:.0f} deg): {err:.3f} mm")
    print(f"   dowel: {perf.orientation_error:.3f} deg tilt, "
          f"{perf.start_error:.3f} mm start offset")

    table = summarize(
        [JointErrorReport("lap1", loc_mm, face_errors, face_angles,
                          model.solid.length)],
        [perf],
    )
    populated = [r for r in table.rows if r.count]
    print("   summary rows (populated bins only):")
    for line in stats_csv(table).splitlines():
        metric = line.split(",", 1)[0]
        if line.startswith("metric") or any(r.metric == metric and f",{r.group:g}," in line for r in populated):
            print(f"     {line}")


if __name__ == "__main__":
    main()
