"""Camera-guided timber fabrication at desk scale.

A printed fiducial map turns a beam into its own coordinate system: a
handheld camera localizes against the tags, a marked toolhead is tracked in
the camera image, and the difference between where the tool is and where the
design says it should be becomes live cut and drill guidance.  A session log
captures every decision for deterministic replay, and a scan pipeline scores
the as-built result against the design.

Modules:
    geometry    rigid transforms, quaternions, frame-tagged poses
    camera      pinhole intrinsics and projection
    mapping     tag detection geometry, map stitching, camera localization
    toolheads   tool marker models and image-based pose refinement
    acim        the execution model: beam, cuts, holes, registration, states
    feedback    tolerance checks turning poses into operator guidance
    session     append-only event log, legality rules, deterministic replay
    simulate    synthetic scenes, scripted sessions, scan synthesis
    evaluate    point clouds, trimmed ICP, joint and drill-hole error stats
    service     WebSocket session service for live user interfaces
    cli         command line front end
"""

from .acim import (
    BeamSolid,
    CutJoint,
    ExecutionModel,
    Hole,
    PlanarFace,
    State,
    acim_hash,
    cycle_candidate,
    lock,
    parse_acim,
    register_to_map,
    serialize_acim,
    set_state,
    slide_along_axis,
)
from .camera import CameraIntrinsics
from .evaluate import (
    IcpResult,
    JointErrorReport,
    PerforationReport,
    PointCloud,
    StatsTable,
    icp_register,
    joint_face_error,
    joint_location_error,
    load_ply,
    perforation_errors,
    sample_model_cloud,
    save_ply,
    segment_dowel,
    segment_joint,
    stats_csv,
    summarize,
)
from .feedback import (
    ChainsawFeedback,
    CutFeedback,
    DrillFeedback,
    FeedbackFrame,
    ToleranceProfile,
    make_frame,
)
from .geometry import FramedPose, FrameTag, Plane, Pose
from .mapping import (
    LocalizationFailure,
    Tag,
    TagMap,
    TagObservation,
    build_map,
    load_tag_map,
    localize,
    save_tag_map,
)
from .session import (
    EventKind,
    LogWriter,
    SessionEvent,
    SessionHeader,
    SessionLog,
    export_log,
    import_log,
    record,
    replay,
)
from .simulate import (
    CameraPath,
    NoiseModel,
    ScenarioSpec,
    StripeLayout,
    ToolScript,
    load_scenario,
    make_scene,
    observe,
    save_scenario,
    synth_scan,
)
from .toolheads import (
    ToolheadModel,
    ToolheadPose,
    load_library,
    parse_acit,
    refine_pose,
    save_acit,
    serialize_acit,
    set_initial_pose,
)

__version__ = "0.1.0"

__all__ = [
    "BeamSolid",
    "CameraIntrinsics",
    "CameraPath",
    "ChainsawFeedback",
    "CutFeedback",
    "CutJoint",
    "DrillFeedback",
    "EventKind",
    "ExecutionModel",
    "FeedbackFrame",
    "FramedPose",
    "FrameTag",
    "Hole",
    "IcpResult",
    "JointErrorReport",
    "LocalizationFailure",
    "LogWriter",
    "NoiseModel",
    "PerforationReport",
    "PlanarFace",
    "Plane",
    "PointCloud",
    "Pose",
    "ScenarioSpec",
    "SessionEvent",
    "SessionHeader",
    "SessionLog",
    "State",
    "StatsTable",
    "StripeLayout",
    "Tag",
    "TagMap",
    "TagObservation",
    "ToleranceProfile",
    "ToolScript",
    "ToolheadModel",
    "ToolheadPose",
    "acim_hash",
    "build_map",
    "cycle_candidate",
    "export_log",
    "icp_register",
    "import_log",
    "joint_face_error",
    "joint_location_error",
    "load_library",
    "load_ply",
    "load_scenario",
    "load_tag_map",
    "localize",
    "lock",
    "make_frame",
    "make_scene",
    "observe",
    "parse_acim",
    "parse_acit",
    "perforation_errors",
    "record",
    "refine_pose",
    "register_to_map",
    "replay",
    "sample_model_cloud",
    "save_acit",
    "save_ply",
    "save_scenario",
    "save_tag_map",
    "segment_dowel",
    "segment_joint",
    "serialize_acim",
    "serialize_acit",
    "set_initial_pose",
    "set_state",
    "slide_along_axis",
    "stats_csv",
    "summarize",
    "synth_scan",
]
