"""Tests for the synthetic scene generator."""

import numpy as np
import pytest

from beamguide.camera import CameraIntrinsics
from beamguide.fixtures import demo_model, demo_saw
from beamguide.geometry import (
    Plane,
    Pose,
    quat_from_matrix,
    quat_from_rotvec,
    rotation_angle_deg,
)
from beamguide.mapping import TAG_ID_LIMIT, project_tag
from beamguide.session import AsBuiltModel
from beamguide.simulate import (
    CameraPath,
    LayoutOverflow,
    NoiseModel,
    ScenarioFormatError,
    ScenarioSpec,
    SimulateError,
    StripeLayout,
    ToolScript,
    dump_scenario,
    make_scene,
    observe,
    observe_toolhead,
    parse_scenario,
    synth_scan,
)
from beamguide.toolheads import set_initial_pose, refine_pose
from beamguide.geometry import FramedPose, FrameTag


def make_intr():
    return CameraIntrinsics(fx=900.0, fy=900.0, cx=640.0, cy=360.0, width=1280, height=720)


def look_down(height, x=0.0):
    """Camera placement straight above the beam looking down, x axis shared."""
    rot = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])
    return Pose(quat_from_matrix(rot), np.array([x, 0.0, height]))


def basic_spec(seed=4, noise=None, frame_count=1, faces=("top",)):
    return ScenarioSpec(
        name="unit",
        beam_dims=(1.0, 0.14, 0.14),
        layout=StripeLayout(47, 0.0213, tuple(faces)),
        path=CameraPath([look_down(0.52)], frame_count),
        noise=noise if noise is not None else NoiseModel(),
        seed=seed,
    )


def test_stripe_layout_counts_and_face_planes():
    spec = basic_spec(faces=("top", "left"))
    scene, truth = make_scene(spec)
    assert len(scene.tags) == 94
    ids = [t.tag_id for t in scene.tags]
    assert len(set(ids)) == 94
    assert all(0 <= i < TAG_ID_LIMIT for i in ids)

    top = scene.tags[:47]
    left = scene.tags[47:]
    assert np.allclose([t.corners[:, 2] for t in top], 0.07, atol=1e-12)
    assert np.allclose([t.corners[:, 1] for t in left], 0.07, atol=1e-12)
    # centers run along the length at the requested pitch
    centers = np.array([t.corners.mean(axis=0) for t in top])
    gaps = np.diff(centers[:, 0])
    assert np.allclose(gaps, 0.0213, atol=1e-12)
    assert truth.solid.length == 1.0


def test_forty_seven_tags_fill_one_meter_exactly():
    # (47-1) * 21.3 mm + 20 mm tag side = 999.8 mm: fits
    make_scene(basic_spec())
    # one more tag or a hair more pitch does not
    over = ScenarioSpec(
        "x", (1.0, 0.14, 0.14),
        StripeLayout(48, 0.0213, ("top",)),
        CameraPath([look_down(0.5)], 1),
    )
    with pytest.raises(LayoutOverflow, match="48 tags"):
        make_scene(over)
    wide = ScenarioSpec(
        "x", (1.0, 0.14, 0.14),
        StripeLayout(47, 0.0214, ("top",)),
        CameraPath([look_down(0.5)], 1),
    )
    with pytest.raises(LayoutOverflow):
        make_scene(wide)


def test_layout_validation():
    with pytest.raises(SimulateError, match="below the tag side"):
        StripeLayout(10, 0.010, ("top",))
    with pytest.raises(SimulateError, match="subset"):
        StripeLayout(10, 0.030, ("roof",))
    with pytest.raises(SimulateError, match="at least one tag"):
        StripeLayout(0, 0.030, ("top",))
    with pytest.raises(SimulateError, match="positive"):
        make_scene(
            ScenarioSpec(
                "x", (0.0, 0.14, 0.14),
                StripeLayout(5, 0.03, ("top",)),
                CameraPath([look_down(0.5)], 1),
            )
        )


def test_same_seed_reproduces_scene():
    a, _ = make_scene(basic_spec(seed=9))
    b, _ = make_scene(basic_spec(seed=9))
    assert [t.tag_id for t in a.tags] == [t.tag_id for t in b.tags]
    for ta, tb in zip(a.tags, b.tags):
        assert np.array_equal(ta.corners, tb.corners)
    c, _ = make_scene(basic_spec(seed=10))
    assert [t.tag_id for t in c.tags] != [t.tag_id for t in a.tags]


def test_noiseless_observations_are_exact_projections():
    intr = make_intr()
    scene, _ = make_scene(basic_spec())
    obs = observe(scene, 0, intr)
    assert len(obs) > 10
    cam = scene.camera_pose(0)
    by_id = {t.tag_id: t for t in scene.tags}
    for o in obs:
        direct = project_tag(intr, cam, by_id[o.tag_id], 0)
        assert np.array_equal(o.corners, direct.corners)


def test_corner_noise_statistics():
    intr = make_intr()
    sigma = 0.5
    scene, _ = make_scene(basic_spec(frame_count=100))
    exact = {o.tag_id: o.corners for o in observe(scene, 0, intr, NoiseModel())}
    devs = []
    noise = NoiseModel(corner_sigma_px=sigma)
    for f in range(100):
        for o in observe(scene, f, intr, noise):
            devs.append((o.corners - exact[o.tag_id]).ravel())
    devs = np.concatenate(devs)
    assert len(devs) > 10000
    assert abs(np.std(devs) - sigma) < 0.1 * sigma


def test_outliers_are_replaced_in_image():
    intr = make_intr()
    rate = 0.2
    scene, _ = make_scene(basic_spec(frame_count=60))
    exact = {o.tag_id: o.corners for o in observe(scene, 0, intr, NoiseModel())}
    replaced = total = 0
    for f in range(60):
        for o in observe(scene, f, intr, NoiseModel(outlier_rate=rate)):
            same = np.all(o.corners == exact[o.tag_id], axis=1)
            replaced += int(np.sum(~same))
            total += 4
            assert np.all(intr.in_bounds(o.corners))
    assert total > 4000
    assert abs(replaced / total - rate) < 0.05


def test_camera_facing_away_sees_nothing():
    intr = make_intr()
    spec = ScenarioSpec(
        "away", (1.0, 0.14, 0.14),
        StripeLayout(47, 0.0213, ("top",)),
        CameraPath([Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 0.5]))], 1),
    )
    scene, _ = make_scene(spec)
    assert observe(scene, 0, intr) == []


def test_heavy_noise_never_leaks_out_of_bounds():
    intr = make_intr()
    scene, _ = make_scene(basic_spec(frame_count=50))
    clean_count = len(observe(scene, 0, intr))
    for f in range(50):
        obs = observe(scene, f, intr, NoiseModel(corner_sigma_px=5.0))
        assert len(obs) <= clean_count
        for o in obs:
            assert np.all(intr.in_bounds(o.corners))


def test_observe_is_deterministic_per_seed():
    intr = make_intr()
    scene, _ = make_scene(basic_spec())
    noise = NoiseModel(corner_sigma_px=0.7, outlier_rate=0.05)
    a = observe(scene, 0, intr, noise)
    b = observe(scene, 0, intr, noise)
    assert len(a) == len(b)
    for oa, ob in zip(a, b):
        assert oa.tag_id == ob.tag_id
        assert np.array_equal(oa.corners, ob.corners)


def test_toolhead_observation_supports_refinement():
    intr = make_intr()
    saw = demo_saw()
    place_tool = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 0.1]))
    spec = ScenarioSpec(
        "tool", (1.0, 0.14, 0.14),
        StripeLayout(47, 0.0213, ("top",)),
        CameraPath([look_down(0.62)], 5),
        tools=(ToolScript(saw.tool_id, "lap1", [place_tool], 0, 4),),
    )
    scene, _ = make_scene(spec)
    seen = observe_toolhead(scene, 2, saw, intr)
    assert 4 <= len(seen) <= saw.sample_points.shape[0]

    place_cam = look_down(0.62)
    truth_ce = place_cam.then(place_tool.inverse())
    wobble = Pose(
        quat_from_rotvec(np.deg2rad(1.0) * np.array([0.3, 0.8, 0.52])),
        np.array([0.002, -0.001, 0.003]),
    )
    init = set_initial_pose(
        saw, FramedPose(wobble.then(truth_ce), FrameTag.CAMERA, FrameTag.TOOLHEAD)
    )
    refined = refine_pose(saw, seen, init, intr)
    diff = refined.pose.pose.then(truth_ce.inverse())
    assert np.linalg.norm(diff.t) < 1e-6
    assert rotation_angle_deg(diff.q) < 1e-6
    assert refined.reproj_rmse < 1e-6

    # outside the script window there is nothing to see
    assert observe_toolhead(scene, 0, saw, intr, NoiseModel()) is not None
    spec2 = ScenarioSpec(
        "tool2", (1.0, 0.14, 0.14),
        StripeLayout(47, 0.0213, ("top",)),
        CameraPath([look_down(0.62)], 5),
        tools=(ToolScript(saw.tool_id, "lap1", [place_tool], 1, 3),),
    )
    scene2, _ = make_scene(spec2)
    assert observe_toolhead(scene2, 0, saw, intr) == []
    with pytest.raises(SimulateError, match="no script"):
        scene2.tool_script("ghost")


def test_tool_script_window_validation():
    place = Pose.identity()
    with pytest.raises(SimulateError, match="inverted"):
        ToolScript("t", "c", [place], 5, 2)
    script = ToolScript("t", "c", [place], 1, 3)
    with pytest.raises(SimulateError, match="outside tool window"):
        script.placement_at(0)


def test_camera_path_interpolation():
    a = look_down(0.5, x=-0.3)
    b = look_down(0.5, x=0.3)
    path = CameraPath([a, b], 7)
    mid = path.placement_at(3)
    assert np.allclose(mid.t, [0.0, 0.0, 0.5], atol=1e-12)
    assert np.allclose(path.placement_at(0).t, a.t)
    assert np.allclose(path.placement_at(6).t, b.t)
    with pytest.raises(SimulateError, match="outside path"):
        path.pose_at(7)


def test_scenario_text_roundtrip():
    saw = demo_saw()
    spec = ScenarioSpec(
        "roundtrip", (2.0, 0.14, 0.14),
        StripeLayout(40, 0.024, ("top", "right"), stripes=2),
        CameraPath([look_down(0.5, -0.4), look_down(0.5, 0.4)], 24),
        tools=(ToolScript(saw.tool_id, "lap1", [Pose.identity()], 3, 9),),
        noise=NoiseModel(0.5, 0.01, 0.0002),
        seed=77,
    )
    text = dump_scenario(spec)
    back = parse_scenario(text)
    assert dump_scenario(back) == text
    assert back.layout == spec.layout
    assert back.noise == spec.noise
    assert back.seed == 77

    with pytest.raises(ScenarioFormatError, match="header"):
        parse_scenario("nope: 1\n")
    with pytest.raises(ScenarioFormatError, match="bad scenario record"):
        parse_scenario(text.replace("frame_count: 24", "frames: 24"))


def test_synth_scan_noiseless_plain_beam_lies_on_surface():
    model = demo_model()
    cloud = synth_scan(model, None, 8e3, 0.0, seed=3)
    half = np.array([1.0, 0.07, 0.07])
    dist = np.max(np.abs(cloud.points) - half, axis=1)
    assert np.max(np.abs(dist)) < 1e-9


def test_synth_scan_reflects_as_built_displacement():
    model = demo_model()
    joint = model.component("lap1")
    shift = 0.002
    cuts = [
        (f.face_id, Plane(f.normal, f.plane.offset - shift)) for f in joint.faces
    ]
    built = AsBuiltModel(executed_cuts=cuts)
    cloud = synth_scan(model, built, 2e4, 0.0, seed=5)
    seat = next(p for fid, p in cuts if fid == "lap1_seat")
    on_seat = np.abs(seat.signed_distance(cloud.points)) < 1e-9
    pts = cloud.points[on_seat]
    assert len(pts) > 100
    assert np.allclose(pts[:, 2], -shift, atol=1e-9)


def test_synth_scan_density_and_determinism():
    model = demo_model()
    n1 = len(synth_scan(model, None, 4e3, 0.0, seed=1))
    n2 = len(synth_scan(model, None, 8e3, 0.0, seed=1))
    assert abs(n2 - 2 * n1) <= 0.05 * 2 * n1

    a = synth_scan(model, None, 4e3, 0.0003, seed=6)
    b = synth_scan(model, None, 4e3, 0.0003, seed=6)
    assert np.array_equal(a.points, b.points)
    c = synth_scan(model, None, 4e3, 0.0003, seed=7)
    assert not np.array_equal(a.points, c.points)
