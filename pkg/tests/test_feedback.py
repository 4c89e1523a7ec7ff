import numpy as np
import pytest

from beamguide.acim import CutJoint, Hole, NotRegistered, PlanarFace, State, lock
from beamguide.feedback import (
    ChainsawFeedback,
    CutFeedback,
    DegenerateFace,
    DrillFeedback,
    KindMismatch,
    NoSelectableFace,
    ToleranceProfile,
    chainsaw_feedback,
    cut_feedback,
    drill_feedback,
    make_frame,
    nearest_face,
)
from beamguide.fixtures import demo_chainsaw, demo_drill, demo_model, demo_saw
from beamguide.geometry import (
    FramedPose,
    FrameTag,
    Pose,
    quat_from_rotvec,
    quat_rotate,
)
from beamguide.mapping import LocalizationFailure
from beamguide.toolheads import (
    ChainsawGeometry,
    CircularSawGeometry,
    DrillGeometry,
    set_initial_pose,
)

TOL = ToleranceProfile()


def seat_face():
    return PlanarFace(
        "seat",
        np.array(
            [
                [0.86, -0.07, 0.0],
                [1.00, -0.07, 0.0],
                [1.00, 0.07, 0.0],
                [0.86, 0.07, 0.0],
            ]
        ),
        np.array([0.0, 0.0, 1.0]),
    )


def saw_on_target(kerf=0.003, radius=0.17):
    """Blade in the kerf-compensated seat plane, lowest point on the bottom edge."""
    return CircularSawGeometry(
        center=np.array([0.93, 0.1, kerf / 2.0]),
        normal=np.array([0.0, 0.0, 1.0]),
        radius=radius,
        kerf=kerf,
    )


def test_tolerance_validation():
    with pytest.raises(ValueError):
        ToleranceProfile(cut_position=0.0)
    with pytest.raises(ValueError):
        ToleranceProfile(drill_depth=-1.0)


def test_cut_zero_fixpoint():
    fb = cut_feedback(saw_on_target(), seat_face(), TOL)
    assert isinstance(fb, CutFeedback)
    assert fb.face_id == "seat"
    assert abs(fb.position_error) < 1e-9
    assert abs(fb.orientation_error) < 1e-9
    assert abs(fb.depth_error) < 1e-9
    assert fb.all_green


def test_cut_position_linearity_and_kerf():
    face = seat_face()
    base = saw_on_target(kerf=0.003)
    for delta_mm in (-3.0, -1.5, 0.5, 2.0, 7.25):
        geo = CircularSawGeometry(
            base.center + np.array([0, 0, delta_mm / 1000.0]),
            base.normal,
            base.radius,
            base.kerf,
        )
        fb = cut_feedback(geo, face, TOL)
        assert fb.position_error == pytest.approx(delta_mm, abs=1e-9)

    # Blade centered on the nominal face plane with a 3 mm kerf must move
    # half a kerf into the waste.
    geo = CircularSawGeometry(
        np.array([0.93, 0.1, 0.0]), base.normal, base.radius, 0.003
    )
    fb = cut_feedback(geo, face, TOL)
    assert fb.position_error == pytest.approx(-1.5, abs=1e-9)


def test_cut_orientation_fold():
    face = seat_face()
    base = saw_on_target()
    q = quat_from_rotvec(np.deg2rad(5.0) * np.array([1.0, 0.0, 0.0]))
    tilted = quat_rotate(q, base.normal)
    for normal in (tilted, -tilted):
        geo = CircularSawGeometry(base.center, normal, base.radius, base.kerf)
        fb = cut_feedback(geo, face, TOL)
        assert fb.orientation_error == pytest.approx(5.0, abs=1e-9)


def test_cut_depth_sign():
    face = seat_face()
    for extra_mm in (-4.0, -1.0, 2.0, 6.5):
        geo = saw_on_target(radius=0.17 + extra_mm / 1000.0)
        fb = cut_feedback(geo, face, TOL)
        assert fb.depth_error == pytest.approx(extra_mm, abs=1e-9)


def test_cut_degenerate_configurations():
    face = seat_face()
    centered = CircularSawGeometry(
        np.array([0.93, 0.0, 0.0015]), np.array([0.0, 0.0, 1.0]), 0.17, 0.003
    )
    with pytest.raises(DegenerateFace):
        cut_feedback(centered, face, TOL)
    # Blade plane normal along the depth direction: no lowest point exists.
    sideways = CircularSawGeometry(
        np.array([0.93, 0.1, 0.0015]), np.array([0.0, 1.0, 0.0]), 0.17, 0.003
    )
    with pytest.raises(DegenerateFace):
        cut_feedback(sideways, face, TOL)


def bar_in_plane(z=0.004):
    start = np.array([0.90, -0.10, z])
    mid = np.array([0.93, 0.05, z])
    end = np.array([0.95, 0.20, z])
    return ChainsawGeometry(
        base=start - np.array([0, 0.05, 0]),
        chain_start=start,
        chain_mid=mid,
        chain_end=end,
        normal=np.array([0.0, 0.0, 1.0]),
        kerf=0.008,
    )


def test_chainsaw_zero_and_translation():
    face = seat_face()
    geo = bar_in_plane()
    fb = chainsaw_feedback(geo, face, TOL)
    assert isinstance(fb, ChainsawFeedback)
    assert abs(fb.far_point_error) < 1e-9
    assert abs(fb.bottom_point_error) < 1e-9
    assert abs(fb.orientation_error) < 1e-9
    assert fb.all_green

    shifted = ChainsawGeometry(
        geo.base + [0, 0, 0.004],
        geo.chain_start + [0, 0, 0.004],
        geo.chain_mid + [0, 0, 0.004],
        geo.chain_end + [0, 0, 0.004],
        geo.normal,
        geo.kerf,
    )
    fb = chainsaw_feedback(shifted, face, TOL)
    assert fb.far_point_error == pytest.approx(4.0, abs=1e-9)
    assert fb.bottom_point_error == pytest.approx(4.0, abs=1e-9)


def test_chainsaw_rotation_about_start():
    face = seat_face()
    geo = bar_in_plane()
    span = geo.chain_end - geo.chain_start
    axis = np.cross(geo.normal, span / np.linalg.norm(span))
    q = quat_from_rotvec(np.deg2rad(2.0) * axis)

    def spin(p):
        return quat_rotate(q, p - geo.chain_start) + geo.chain_start

    rotated = ChainsawGeometry(
        spin(geo.base),
        geo.chain_start,
        spin(geo.chain_mid),
        spin(geo.chain_end),
        quat_rotate(q, geo.normal),
        geo.kerf,
    )
    fb = chainsaw_feedback(rotated, face, TOL)
    expect_far = 1000.0 * np.linalg.norm(span) * np.sin(np.deg2rad(2.0))
    assert abs(fb.far_point_error) == pytest.approx(expect_far, rel=1e-9)
    assert abs(fb.bottom_point_error) < abs(fb.far_point_error)
    assert fb.orientation_error == pytest.approx(2.0, abs=1e-9)


def drill_geo(tooltip, axis):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    tooltip = np.asarray(tooltip, dtype=float)
    return DrillGeometry(
        base=tooltip - 0.15 * axis,
        chuck=tooltip - 0.11 * axis,
        eating_start=tooltip - 0.01 * axis,
        tooltip=tooltip,
        axis=axis,
        nominal_diameter=0.016,
    )


def peg():
    return Hole("peg1", [0.5, 0.0, 0.07], [0.5, 0.0, -0.07], 0.006, through=True)


def test_drill_at_start():
    hole = peg()
    fb = drill_feedback(drill_geo(hole.start, [0, 0, -1]), hole, TOL)
    assert isinstance(fb, DrillFeedback)
    assert abs(fb.angle_error) < 1e-9
    assert abs(fb.start_error) < 1e-9
    assert fb.depth_remaining == pytest.approx(140.0, abs=1e-9)
    assert fb.within["angle"] and fb.within["start"] and not fb.within["depth"]


def test_drill_angle_and_fold():
    hole = peg()
    axis30 = np.array([np.sin(np.deg2rad(30.0)), 0.0, -np.cos(np.deg2rad(30.0))])
    fb = drill_feedback(drill_geo(hole.start, axis30), hole, TOL)
    assert fb.angle_error == pytest.approx(30.0, abs=1e-9)
    fb = drill_feedback(drill_geo(hole.start, -axis30), hole, TOL)
    assert fb.angle_error == pytest.approx(30.0, abs=1e-9)


def test_drill_start_error_switches_at_penetration():
    hole = peg()
    lateral = np.array([0.0038, 0.0, 0.0])
    fb = drill_feedback(drill_geo(hole.start + lateral, [0, 0, -1]), hole, TOL)
    assert fb.start_error == pytest.approx(3.8, abs=1e-9)

    above = hole.start + lateral + np.array([0.0, 0.0, 0.01])
    fb = drill_feedback(drill_geo(above, [0, 0, -1]), hole, TOL)
    assert fb.start_error == pytest.approx(
        1000.0 * np.linalg.norm(lateral + [0, 0, 0.01]), abs=1e-9
    )

    inside = hole.start + np.array([0.002, 0.0, -0.05])
    fb = drill_feedback(drill_geo(inside, [0, 0, -1]), hole, TOL)
    assert fb.start_error == pytest.approx(2.0, abs=1e-9)
    assert fb.depth_remaining == pytest.approx(90.0, abs=1e-9)


def test_drill_depth_clamp_and_green():
    hole = peg()
    fb = drill_feedback(drill_geo(hole.end, [0, 0, -1]), hole, TOL)
    assert fb.depth_remaining == pytest.approx(0.0, abs=1e-9)
    assert fb.within["depth"] and fb.all_green

    way_past = hole.start + np.array([0.0, 0.0, -0.2])
    fb = drill_feedback(drill_geo(way_past, [0, 0, -1]), hole, TOL)
    assert fb.depth_remaining == pytest.approx(-10.0, abs=1e-12)


def test_nearest_face_rules():
    f1 = seat_face()
    shoulder = PlanarFace(
        "shoulder",
        np.array(
            [
                [0.86, -0.07, 0.0],
                [0.86, 0.07, 0.0],
                [0.86, 0.07, 0.07],
                [0.86, -0.07, 0.07],
            ]
        ),
        np.array([1.0, 0.0, 0.0]),
    )
    joint = CutJoint("lap", [shoulder, f1])
    on_seat = saw_on_target()
    geo = CircularSawGeometry(f1.centroid, on_seat.normal, 0.1, 0.002)
    assert nearest_face(geo, joint) == "seat"

    # Equidistant faces resolve to the lexicographically smaller id.
    fa = PlanarFace("f1", seat_face().polygon, [0, 0, 1.0])
    fb_ = PlanarFace("f2", seat_face().polygon, [0, 0, 1.0])
    tie = CutJoint("tie", [fb_, fa])
    assert nearest_face(geo, tie) == "f1"

    f1.state = State.DONE
    shoulder.state = State.DONE
    with pytest.raises(NoSelectableFace):
        nearest_face(geo, CutJoint("lap", [shoulder, f1]))


def test_nearest_face_matches_brute_force():
    rng = np.random.default_rng(17)
    model = demo_model()
    joint = model.component("lap1")
    for _ in range(50):
        center = rng.uniform(-1, 1, size=3)
        geo = CircularSawGeometry(center, [0, 0, 1.0], 0.1, 0.002)
        expect = min(
            (np.linalg.norm(f.centroid - center), f.face_id) for f in joint.faces
        )[1]
        assert nearest_face(geo, joint) == expect


def rigid(rng):
    return Pose(quat_from_rotvec(rng.normal(scale=0.8, size=3)), rng.normal(size=3))


def test_rigid_invariance():
    rng = np.random.default_rng(23)
    face = seat_face()
    saw = CircularSawGeometry(
        np.array([0.94, 0.08, 0.004]),
        quat_rotate(quat_from_rotvec([0.03, 0.02, 0.0]), np.array([0, 0, 1.0])),
        0.165,
        0.003,
    )
    hole = peg()
    drill = drill_geo(hole.start + [0.001, 0.002, 0.004], [0.05, 0.0, -1.0])
    for _ in range(20):
        t = rigid(rng)
        fb0 = cut_feedback(saw, face, TOL)
        face_t = PlanarFace(face.face_id, t.apply(face.polygon), t.rotate(face.normal))
        saw_t = CircularSawGeometry(
            t.apply(saw.center), t.rotate(saw.normal), saw.radius, saw.kerf
        )
        fb1 = cut_feedback(saw_t, face_t, TOL)
        assert fb1.position_error == pytest.approx(fb0.position_error, abs=1e-9)
        assert fb1.orientation_error == pytest.approx(fb0.orientation_error, abs=1e-9)
        assert fb1.depth_error == pytest.approx(fb0.depth_error, abs=1e-9)

        db0 = drill_feedback(drill, hole, TOL)
        hole_t = Hole(hole.hole_id, t.apply(hole.start), t.apply(hole.end), hole.radius)
        drill_t = DrillGeometry(
            t.apply(drill.base),
            t.apply(drill.chuck),
            t.apply(drill.eating_start),
            t.apply(drill.tooltip),
            t.rotate(drill.axis),
            drill.nominal_diameter,
        )
        db1 = drill_feedback(drill_t, hole_t, TOL)
        assert db1.angle_error == pytest.approx(db0.angle_error, abs=1e-9)
        assert db1.start_error == pytest.approx(db0.start_error, abs=1e-9)
        assert db1.depth_remaining == pytest.approx(db0.depth_remaining, abs=1e-9)


def test_tightening_tolerances_is_monotone():
    face = seat_face()
    geo = CircularSawGeometry(
        np.array([0.93, 0.1, 0.0022]), np.array([0.01, 0.0, 1.0]), 0.1703, 0.003
    )
    loose = cut_feedback(geo, face, TOL)
    tight = cut_feedback(
        geo,
        face,
        ToleranceProfile(cut_position=0.01, cut_orientation=0.01, cut_depth=0.01),
    )
    for key, green in tight.within.items():
        if green:
            assert loose.within[key]


def identity_frames():
    loc = FramedPose(Pose.identity(), FrameTag.TIMBER, FrameTag.CAMERA)
    reg = FramedPose(Pose.identity(), FrameTag.WORLD, FrameTag.TIMBER)
    return loc, reg


def registered_model():
    model = demo_model()
    _, reg = identity_frames()
    model.registration = reg
    lock(model)
    return model


def test_make_frame_dispatch():
    model = registered_model()
    loc, _ = identity_frames()
    drill = demo_drill()
    pose = set_initial_pose(drill, FramedPose(Pose.identity(), FrameTag.CAMERA, FrameTag.TOOLHEAD))

    frame = make_frame(loc, drill, pose, model, model.component("peg1"), TOL, timestamp=5.0)
    assert frame.timestamp == 5.0
    assert frame.status == "ok"
    assert isinstance(frame.payload, DrillFeedback)
    assert frame.payload.hole_id == "peg1"

    with pytest.raises(KindMismatch):
        make_frame(loc, drill, pose, model, model.component("lap1"), TOL)

    # Park the blade over the lap seat (identity leaves it at the origin,
    # where the blade plane is degenerate against the shoulder face).
    saw = demo_saw()
    saw_pose = set_initial_pose(
        saw,
        FramedPose(
            Pose(np.array([1.0, 0, 0, 0]), np.array([-0.93, -0.1, 0.05875])),
            FrameTag.CAMERA,
            FrameTag.TOOLHEAD,
        ),
    )
    frame = make_frame(loc, saw, saw_pose, model, model.component("lap1"), TOL)
    assert isinstance(frame.payload, CutFeedback)
    assert frame.payload.face_id == "lap1_seat"
    assert abs(frame.payload.position_error) < 1e-9
    with pytest.raises(KindMismatch):
        make_frame(loc, saw, saw_pose, model, model.component("peg1"), TOL)

    chain = demo_chainsaw()
    chain_pose = set_initial_pose(chain, FramedPose(Pose.identity(), FrameTag.CAMERA, FrameTag.TOOLHEAD))
    frame = make_frame(loc, chain, chain_pose, model, model.component("lap1"), TOL)
    assert isinstance(frame.payload, ChainsawFeedback)
    assert frame.payload.face_id == "lap1_shoulder"


def test_make_frame_localization_failure_and_guards():
    model = registered_model()
    loc, _ = identity_frames()
    drill = demo_drill()
    pose = set_initial_pose(drill, FramedPose(Pose.identity(), FrameTag.CAMERA, FrameTag.TOOLHEAD))

    frame = make_frame(
        LocalizationFailure("no tags in view"), drill, pose, model,
        model.component("peg1"), TOL, timestamp=1.0,
    )
    assert frame.payload is None
    assert frame.status == "no tags in view"

    bare = demo_model()
    with pytest.raises(NotRegistered):
        make_frame(loc, drill, pose, bare, bare.component("peg1"), TOL)

    saw = demo_saw()
    saw_pose = set_initial_pose(saw, FramedPose(Pose.identity(), FrameTag.CAMERA, FrameTag.TOOLHEAD))
    for fid in ("lap1_seat", "lap1_shoulder"):
        model.component(fid).state = State.DONE
    with pytest.raises(NoSelectableFace):
        make_frame(loc, saw, saw_pose, model, model.component("lap1"), TOL)
