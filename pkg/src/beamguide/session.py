"""Fabrication session recording and replay.

A session log is an append-only list of numbered events plus a header.  The
log is self-contained: locking embeds the full beam model text and mounting
embeds the tool description, so replay needs nothing but the log.  Achieved
geometry for a Done component is taken from the last pose sample recorded
before the Done event, expressed back in the model frame through the locked
registration.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .acim import (
    CutJoint,
    ExecutionModel,
    Hole,
    PlanarFace,
    UnknownId,
    acim_hash,
    parse_acim,
)
from .geometry import FramedPose, FrameTag, Plane, Pose, compose
from .toolheads import (
    ChainsawGeometry,
    CircularSawGeometry,
    DrillGeometry,
    ToolheadModel,
    ToolheadPose,
    ToolKind,
    derived_geometry,
    parse_acit,
)

__all__ = [
    "SessionError",
    "SequenceGap",
    "ParseError",
    "CorruptLog",
    "EventKind",
    "SessionEvent",
    "SessionHeader",
    "SessionLog",
    "AsBuiltModel",
    "pose_payload",
    "pose_from_payload",
    "feedback_payload",
    "record",
    "export_log",
    "import_log",
    "LogWriter",
    "replay",
]


class SessionError(Exception):
    """Base class for session failures."""


class SequenceGap(SessionError):
    """Raised when an event's seq is not exactly last + 1."""


class ParseError(SessionError):
    """Raised on malformed log text; carries the 0-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class CorruptLog(SessionError):
    """Raised during replay when an event references something never
    introduced (unknown component, unmounted tool, missing pose sample)."""


class EventKind(Enum):
    MAP_LOADED = "MapLoaded"
    MODEL_LOCKED = "ModelLocked"
    COMPONENT_SELECTED = "ComponentSelected"
    TOOL_MOUNTED = "ToolMounted"
    POSE_SAMPLE = "PoseSample"
    FEEDBACK_EMITTED = "FeedbackEmitted"
    STATE_CHANGED = "StateChanged"
    CANDIDATE_CYCLED = "CandidateCycled"
    SLIDE_APPLIED = "SlideApplied"


@dataclass(frozen=True)
class SessionEvent:
    seq: int
    timestamp: float
    kind: EventKind
    payload: dict

    def __post_init__(self):
        if self.seq < 1:
            raise SessionError("event seq starts at 1")
        if self.timestamp < 0:
            raise SessionError("timestamp must be >= 0 ms")


@dataclass
class SessionHeader:
    beam_id: str = ""
    map_id: str = ""
    model_hash: str = ""
    tool_ids: list[str] = field(default_factory=list)


@dataclass
class SessionLog:
    header: SessionHeader = field(default_factory=SessionHeader)
    events: list[SessionEvent] = field(default_factory=list)
    _cache_len: int = field(default=-1, compare=False, repr=False)
    _mounted: set = field(default_factory=set, compare=False, repr=False)
    _seen: set = field(default_factory=set, compare=False, repr=False)
    _selected: str | None = field(default=None, compare=False, repr=False)
    _scope: set = field(default_factory=set, compare=False, repr=False)
    _joint_faces: dict = field(default_factory=dict, compare=False, repr=False)

    def last_seq(self) -> int:
        return self.events[-1].seq if self.events else 0


def pose_payload(pose: Pose) -> dict:
    return {"q": [float(v) for v in pose.q], "t": [float(v) for v in pose.t]}


def pose_from_payload(data: dict) -> Pose:
    return Pose(np.asarray(data["q"], dtype=float), np.asarray(data["t"], dtype=float))


def feedback_payload(frame, component_id: str) -> dict:
    """Flatten a feedback frame into a JSON-able event payload."""
    body = frame.payload
    metrics: dict = {}
    if body is not None:
        for name, value in vars(body).items():
            if isinstance(value, dict):
                metrics[name] = {k: bool(v) for k, v in value.items()}
            elif isinstance(value, (bool, np.bool_)):
                metrics[name] = bool(value)
            elif isinstance(value, (int, float, np.floating)):
                metrics[name] = float(value)
            else:
                metrics[name] = value
    return {"component_id": component_id, "status": frame.status, "metrics": metrics}


_REQUIRED_KEYS = {
    EventKind.MAP_LOADED: ("map_id",),
    EventKind.MODEL_LOCKED: ("acim", "registration", "candidate_index", "slide_offset"),
    EventKind.COMPONENT_SELECTED: ("component_id",),
    EventKind.TOOL_MOUNTED: ("tool_id", "acit"),
    EventKind.POSE_SAMPLE: ("tool_id", "cam_in_timber", "tool_in_cam"),
    EventKind.FEEDBACK_EMITTED: ("component_id", "status"),
    EventKind.STATE_CHANGED: ("component_id", "state"),
    EventKind.CANDIDATE_CYCLED: ("index",),
    EventKind.SLIDE_APPLIED: ("offset",),
}


def _absorb(log: SessionLog, event: SessionEvent) -> None:
    """Fold one event into the cached legality state."""
    log._seen.add(event.kind)
    if event.kind is EventKind.TOOL_MOUNTED:
        log._mounted.add(event.payload["tool_id"])
    elif event.kind is EventKind.MODEL_LOCKED:
        try:
            model = parse_acim(event.payload["acim"])
        except Exception:
            model = None
        if model is not None:
            for cut in model.cuts:
                log._joint_faces[cut.joint_id] = {f.face_id for f in cut.faces}
    elif event.kind is EventKind.COMPONENT_SELECTED:
        cid = event.payload["component_id"]
        log._selected = cid
        log._scope = {cid} | log._joint_faces.get(cid, set())
    elif event.kind is EventKind.STATE_CHANGED and event.payload["state"] == "done":
        if event.payload["component_id"] == log._selected:
            log._selected = None
            log._scope = set()


def _refresh_cache(log: SessionLog) -> None:
    if log._cache_len == len(log.events):
        return
    log._cache_len = 0
    log._mounted = set()
    log._seen = set()
    log._selected = None
    log._scope = set()
    log._joint_faces = {}
    for e in log.events:
        _absorb(log, e)
    log._cache_len = len(log.events)


def record(log: SessionLog, event: SessionEvent) -> SessionLog:
    """Append one event, enforcing numbering and state-machine legality.

    Derived legality state is cached on the log, so appends stay O(1); the
    cache rebuilds itself if the event list was edited from outside.
    """
    expected = log.last_seq() + 1
    if event.seq != expected:
        raise SequenceGap(f"expected seq {expected}, got {event.seq}")
    if log.events and event.timestamp < log.events[-1].timestamp:
        raise SessionError("timestamps must be non-decreasing")
    for key in _REQUIRED_KEYS[event.kind]:
        if key not in event.payload:
            raise SessionError(f"{event.kind.value} payload missing '{key}'")

    _refresh_cache(log)
    if event.kind is EventKind.MODEL_LOCKED and EventKind.MAP_LOADED not in log._seen:
        raise SessionError("ModelLocked before any MapLoaded")
    if (
        event.kind is EventKind.COMPONENT_SELECTED
        and EventKind.MODEL_LOCKED not in log._seen
    ):
        raise SessionError("ComponentSelected before ModelLocked")
    if event.kind is EventKind.POSE_SAMPLE:
        if event.payload["tool_id"] not in log._mounted:
            raise SessionError(
                f"PoseSample for unmounted tool '{event.payload['tool_id']}'"
            )
    if event.kind is EventKind.FEEDBACK_EMITTED and log._selected is None:
        raise SessionError("FeedbackEmitted with no component selected")
    if event.kind is EventKind.STATE_CHANGED and event.payload["state"] == "done":
        cid = event.payload["component_id"]
        if log._selected is None or cid not in log._scope:
            raise SessionError(
                f"StateChanged(done) for '{cid}' which is not the current component"
            )

    log.events.append(event)
    _absorb(log, event)
    log._cache_len = len(log.events)
    _update_header(log.header, event)
    return log


def _update_header(header: SessionHeader, event: SessionEvent) -> None:
    if event.kind is EventKind.MAP_LOADED and not header.map_id:
        header.map_id = event.payload["map_id"]
    elif event.kind is EventKind.MODEL_LOCKED:
        if not header.beam_id:
            header.beam_id = event.payload.get("beam_id", "")
        if not header.model_hash:
            header.model_hash = event.payload.get("model_hash", "")
    elif event.kind is EventKind.TOOL_MOUNTED:
        tid = event.payload["tool_id"]
        if tid not in header.tool_ids:
            header.tool_ids.append(tid)


def _header_dict(header: SessionHeader) -> dict:
    return {
        "beam_id": header.beam_id,
        "map_id": header.map_id,
        "model_hash": header.model_hash,
        "tool_ids": list(header.tool_ids),
    }


def export_log(log: SessionLog) -> str:
    """JSON-lines text: header on line 0, one event per following line,
    stable key order."""
    lines = [json.dumps(_header_dict(log.header), sort_keys=True, separators=(",", ":"))]
    for e in log.events:
        lines.append(
            json.dumps(
                {
                    "seq": e.seq,
                    # Canonical form: timestamps always serialize as floats,
                    # so exporting an imported log is byte-identical even
                    # when the recorder supplied integer milliseconds.
                    "timestamp": float(e.timestamp),
                    "kind": e.kind.value,
                    "payload": e.payload,
                },
                sort_keys=True,
                separators=(",", ":"),
            )
        )
    return "\n".join(lines) + "\n"


def import_log(text: str) -> SessionLog:
    lines = text.splitlines()
    if not lines:
        raise ParseError(0, "empty log text")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(0, f"bad header: {exc.msg}") from exc
    if not isinstance(head, dict):
        raise ParseError(0, "header must be a JSON object")
    log = SessionLog(
        SessionHeader(
            beam_id=head.get("beam_id", ""),
            map_id=head.get("map_id", ""),
            model_hash=head.get("model_hash", ""),
            tool_ids=list(head.get("tool_ids", [])),
        )
    )
    for i, line in enumerate(lines[1:], start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(i, f"bad event JSON: {exc.msg}") from exc
        try:
            event = SessionEvent(
                int(obj["seq"]),
                float(obj["timestamp"]),
                EventKind(obj["kind"]),
                dict(obj["payload"]),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ParseError(i, f"bad event structure: {exc}") from exc
        saved = _header_dict(log.header)
        record(log, event)
        log.header = SessionHeader(**saved)
    log.header = SessionHeader(
        beam_id=head.get("beam_id", ""),
        map_id=head.get("map_id", ""),
        model_hash=head.get("model_hash", ""),
        tool_ids=list(head.get("tool_ids", [])),
    )
    return log


class LogWriter:
    """Streaming JSON-lines writer.

    The header must be known up front because the file is append-only; the
    stream is flushed on every event and fsynced at every state change so a
    crash never loses a completed component.
    """

    def __init__(self, path, header: SessionHeader):
        self.log = SessionLog(
            SessionHeader(
                header.beam_id, header.map_id, header.model_hash, list(header.tool_ids)
            )
        )
        self._fh = open(path, "w", encoding="utf-8")
        self._fh.write(
            json.dumps(_header_dict(self.log.header), sort_keys=True, separators=(",", ":"))
            + "\n"
        )
        self._fh.flush()

    def append(self, event: SessionEvent) -> None:
        saved = _header_dict(self.log.header)
        record(self.log, event)
        self.log.header = SessionHeader(**saved)
        self._fh.write(
            json.dumps(
                {
                    "seq": event.seq,
                    # Same canonical form as export_log: float timestamps,
                    # so streamed files parse and re-export byte-identical.
                    "timestamp": float(event.timestamp),
                    "kind": event.kind.value,
                    "payload": event.payload,
                },
                sort_keys=True,
                separators=(",", ":"),
            )
            + "\n"
        )
        self._fh.flush()
        if event.kind is EventKind.STATE_CHANGED:
            os.fsync(self._fh.fileno())

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


@dataclass
class AsBuiltModel:
    """Achieved geometry per Done component, in the model frame."""

    executed_cuts: list[tuple[str, Plane]] = field(default_factory=list)
    executed_holes: list[tuple[str, tuple[np.ndarray, np.ndarray], float]] = field(
        default_factory=list
    )

    def cut_planes(self) -> dict[str, Plane]:
        return dict(self.executed_cuts)

    def hole_rays(self) -> dict[str, tuple[np.ndarray, np.ndarray, float]]:
        return {hid: (ray[0], ray[1], depth) for hid, ray, depth in self.executed_holes}


def _plane_to_frame(plane: Plane, pose: Pose) -> Plane:
    """Re-express a plane under a pose mapping its frame into a new frame."""
    n = pose.rotation @ plane.normal
    return Plane(n, plane.offset + float(n @ pose.t))


def replay(log: SessionLog) -> tuple[AsBuiltModel, list[FramedPose]]:
    """Reconstruct the as-built model and the full tool trajectory.

    Deterministic and pure: parses the embedded model and tool texts, walks
    the events, and converts the last pose sample before each Done into an
    achieved plane (saws) or axis ray (drills) in the model frame.
    """
    model: ExecutionModel | None = None
    reg_inv: Pose | None = None
    tools: dict[str, ToolheadModel] = {}
    last_sample: tuple[str, FramedPose, FramedPose] | None = None
    trajectory: list[FramedPose] = []
    built = AsBuiltModel()

    for event in log.events:
        if event.kind is EventKind.MODEL_LOCKED:
            try:
                model = parse_acim(event.payload["acim"])
            except Exception as exc:
                raise CorruptLog(f"embedded model text unreadable: {exc}") from exc
            reg = pose_from_payload(event.payload["registration"])
            reg_inv = reg.inverse()
        elif event.kind is EventKind.TOOL_MOUNTED:
            try:
                tool = parse_acit(event.payload["acit"])
            except Exception as exc:
                raise CorruptLog(f"embedded tool text unreadable: {exc}") from exc
            if tool.tool_id != event.payload["tool_id"]:
                raise CorruptLog(
                    f"mounted tool id '{event.payload['tool_id']}' does not match "
                    f"embedded description '{tool.tool_id}'"
                )
            tools[tool.tool_id] = tool
        elif event.kind is EventKind.POSE_SAMPLE:
            tid = event.payload["tool_id"]
            if tid not in tools:
                raise CorruptLog(f"pose sample references unmounted tool '{tid}'")
            cam = FramedPose(
                pose_from_payload(event.payload["cam_in_timber"]),
                FrameTag.TIMBER,
                FrameTag.CAMERA,
            )
            tool_in_cam = FramedPose(
                pose_from_payload(event.payload["tool_in_cam"]),
                FrameTag.CAMERA,
                FrameTag.TOOLHEAD,
            )
            last_sample = (tid, cam, tool_in_cam)
            trajectory.append(compose(cam, tool_in_cam))
        elif event.kind is EventKind.STATE_CHANGED and event.payload["state"] == "done":
            if model is None or reg_inv is None:
                raise CorruptLog("StateChanged(done) before any ModelLocked")
            cid = event.payload["component_id"]
            try:
                comp = model.component(cid)
            except UnknownId as exc:
                raise CorruptLog(f"done for unknown component '{cid}'") from exc
            if isinstance(comp, CutJoint):
                continue
            if last_sample is None:
                raise CorruptLog(f"done for '{cid}' with no preceding pose sample")
            tid, cam, tool_in_cam = last_sample
            tool = tools[tid]
            geo = derived_geometry(
                tool, ToolheadPose(tool_in_cam, 0.0, True), cam
            )
            if isinstance(comp, PlanarFace):
                if isinstance(geo, CircularSawGeometry):
                    plane_t = geo.plane
                elif isinstance(geo, ChainsawGeometry):
                    plane_t = geo.bar_plane
                else:
                    raise CorruptLog(
                        f"face '{cid}' marked done while a drill was sampled"
                    )
                blade = _plane_to_frame(plane_t, reg_inv)
                if float(blade.normal @ comp.normal) < 0:
                    blade = Plane(-blade.normal, -blade.offset)
                # The blade center rides kerf/2 into the waste on a perfect
                # cut; the material surface left behind sits kerf/2 back.
                achieved = Plane(blade.normal, blade.offset - geo.kerf / 2.0)
                built.executed_cuts.append((cid, achieved))
            elif isinstance(comp, Hole):
                if not isinstance(geo, DrillGeometry):
                    raise CorruptLog(
                        f"hole '{cid}' marked done while a saw was sampled"
                    )
                axis_w = reg_inv.rotation @ geo.axis
                tip_w = reg_inv.apply(geo.tooltip)
                if float(axis_w @ comp.axis) < 0:
                    axis_w = -axis_w
                rel = comp.start - tip_w
                start_w = tip_w + (float(rel @ axis_w)) * axis_w
                depth = float((tip_w - start_w) @ axis_w)
                built.executed_holes.append((cid, (start_w, axis_w), max(depth, 0.0)))
    return built, trajectory
