"""Live session service: a WebSocket loop the guidance UI drives.

The service owns one simulated scene and one execution model.  Clients send
commands as UTF-8 JSON ``{"seq": n, "kind": "...", "payload": {...}}`` and
receive exactly one ack ``{"type": "ack", "seq": n, "ok": ..., "detail": ...}``
per command, plus a steady stream of ``{"type": "push", ...}`` state
snapshots.  Snapshots are self-contained: a reconnecting client can resume
from any one of them.

Only one client mutates at a time (the first to send a command holds the
slot until it disconnects); everyone else is read-only.  Malformed JSON gets
an error ack and the channel stays open; binary frames close it.

Pose conventions: clients express tool placements in the locked model's
design frame.  The service converts through the registration into the map
frame, where localization and feedback live.
"""

from __future__ import annotations

import asyncio
import contextlib
import dataclasses
import json
import queue
import threading
import time

import numpy as np
import websockets
from websockets.asyncio.server import broadcast
from websockets.exceptions import ConnectionClosed

from .acim import (
    AcimError,
    ExecutionModel,
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
from .camera import CameraError, CameraIntrinsics
from .feedback import (
    ChainsawFeedback,
    CutFeedback,
    DrillFeedback,
    FeedbackError,
    ToleranceProfile,
    make_frame,
)
from .fixtures import closure_model, demo_intrinsics, demo_toolheads
from .geometry import FramedPose, FrameTag, GeometryError, Pose, quat_from_rotvec
from .mapping import (
    LocalizationFailure,
    MappingError,
    build_map,
    localize,
)
from .session import (
    EventKind,
    SessionError,
    SessionEvent,
    SessionHeader,
    SessionLog,
    feedback_payload,
    pose_payload,
    record,
)
from .simulate import (
    ScenarioSpec,
    SimulateError,
    make_scene,
    observe,
    observe_toolhead_at,
)
from .toolheads import (
    ToolheadError,
    refine_pose,
    serialize_acit,
    set_initial_pose,
)

PUSH_INTERVAL = 0.05


class ServiceError(Exception):
    """Command rejected: illegal in the current session state or malformed."""


COMMAND_ERRORS = (
    ServiceError,
    AcimError,
    CameraError,
    FeedbackError,
    GeometryError,
    MappingError,
    SessionError,
    SimulateError,
    ToolheadError,
    ValueError,
    TypeError,
    KeyError,
)

_FEEDBACK_KINDS = {
    CutFeedback: "cut",
    ChainsawFeedback: "chainsaw",
    DrillFeedback: "drill",
}


def _vec(payload, key, size) -> np.ndarray:
    raw = payload.get(key)
    if raw is None:
        raise ServiceError(f"payload needs '{key}' with {size} numbers")
    arr = np.asarray(raw, dtype=float)
    if arr.shape != (size,):
        raise ServiceError(f"'{key}' must have exactly {size} numbers")
    if not np.all(np.isfinite(arr)):
        raise ServiceError(f"'{key}' must be finite")
    return arr


class SessionService:
    """Protocol-free session core; the WebSocket layer is a thin shell.

    All methods run on one event loop, so command handling is serialized by
    construction.  The map is prebuilt at startup to keep LoadMap's ack (and
    every later ack) well under the interactive budget.
    """

    def __init__(
        self,
        spec: ScenarioSpec,
        model: ExecutionModel,
        intr: CameraIntrinsics | None = None,
        tol: ToleranceProfile | None = None,
    ):
        self.spec = spec
        self.intr = demo_intrinsics() if intr is None else intr
        self.tol = ToleranceProfile() if tol is None else tol
        self.scene, self.truth = make_scene(spec)
        self._pristine = serialize_acim(model)
        self._beam_id = model.beam_id

        self._n_map = min(
            (s.start_frame for s in spec.tools), default=spec.path.frame_count
        )
        self._obs_cache: dict[int, list] = {}
        frames = [self._obs(f) for f in range(self._n_map)]
        self._prebuilt_map = build_map(frames, self.intr, beam_id=spec.name)
        truth_tags = {t.tag_id: t for t in self.scene.tags}
        self._map_to_scene = truth_tags[self._prebuilt_map.gauge_tag_id].pose

        self.tag_map = None
        self.model: ExecutionModel | None = None
        self.phase = "idle"
        self.frame = 0
        self.push_seq = 0
        self.selected: str | None = None
        self.tool = None
        self.tool_pose = None
        self.place_model: Pose | None = None
        self.log = SessionLog(
            header=SessionHeader(beam_id=model.beam_id, map_id=spec.name)
        )
        self._tools = {t.tool_id: t for t in demo_toolheads()}
        self._seq = 0
        self._t0 = time.monotonic()
        self._last_ms = 0

    # -- plumbing ---------------------------------------------------------

    def _obs(self, frame: int) -> list:
        if frame not in self._obs_cache:
            self._obs_cache[frame] = observe(self.scene, frame, self.intr)
        return self._obs_cache[frame]

    def _now_ms(self) -> int:
        ms = int((time.monotonic() - self._t0) * 1000.0)
        self._last_ms = max(self._last_ms, ms)
        return self._last_ms

    def _emit(self, kind: EventKind, payload: dict) -> None:
        self._seq += 1
        record(self.log, SessionEvent(self._seq, self._now_ms(), kind, payload))

    def _require_model(self) -> ExecutionModel:
        if self.model is None:
            raise ServiceError("no model loaded")
        return self.model

    def _require_locked(self) -> ExecutionModel:
        model = self._require_model()
        if not model.locked:
            raise ServiceError("model is not locked")
        return model

    def _camera_placement_map(self) -> Pose:
        """Ground-truth camera placement expressed in the map frame."""
        place_scene = self.scene.path.placement_at(self.frame)
        return place_scene.then(self._map_to_scene.inverse())

    def _place_tool_map(self) -> Pose:
        model = self._require_locked()
        if self.place_model is None:
            raise ServiceError("set an initial tool pose first")
        return self.place_model.then(model.registration.pose)

    def _derived_ce(self) -> FramedPose:
        place_cam_map = self._camera_placement_map()
        ce = place_cam_map.then(self._place_tool_map().inverse())
        return FramedPose(ce, FrameTag.CAMERA, FrameTag.TOOLHEAD)

    def _geometry(self) -> dict | None:
        """Model geometry expressed in the map frame, for remote rendering.

        Present from registration onward so clients can draw the overlay
        while candidates are still being cycled; the block tracks the live
        registration (candidate choice and slide offset) on every push.
        """
        model = self.model
        if model is None or model.registration is None:
            return None
        reg = model.registration.pose
        half = model.solid.half_extents
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=float,
        )
        faces = {}
        for cut in model.cuts:
            for face in cut.faces:
                faces[face.face_id] = {
                    "joint_id": cut.joint_id,
                    "polygon": reg.apply(face.polygon).tolist(),
                }
        holes = {}
        for hole in model.holes:
            ends = reg.apply(np.stack([hole.start, hole.end]))
            holes[hole.hole_id] = {
                "start": ends[0].tolist(),
                "end": ends[1].tolist(),
                "radius": float(hole.radius),
            }
        return {
            "corners": reg.apply(signs * half).tolist(),
            "faces": faces,
            "holes": holes,
        }

    def _localize(self):
        if self.tag_map is None:
            return LocalizationFailure("no map loaded")
        return localize(self._obs(self.frame), self.tag_map, self.intr)

    def _sample_pose(self) -> None:
        """Record the current rig as a PoseSample (requires localization)."""
        loc = self._localize()
        if isinstance(loc, LocalizationFailure):
            raise ServiceError(f"localization failed: {loc.reason}")
        self._emit(
            EventKind.POSE_SAMPLE,
            {
                "tool_id": self.tool.tool_id,
                "cam_in_timber": pose_payload(loc.pose),
                "tool_in_cam": pose_payload(self.tool_pose.pose.pose),
            },
        )

    def _feedback(self):
        if (
            self.model is None
            or not self.model.locked
            or self.selected is None
            or self.tool is None
            or self.tool_pose is None
        ):
            return None
        component = self.model.component(self.selected)
        return make_frame(
            self._localize(),
            self.tool,
            self.tool_pose,
            self.model,
            component,
            self.tol,
            timestamp=self.frame / 10.0,
        )

    def _preset_frame(self, component_id: str) -> int | None:
        """Frame of the scenario tool window matching the selection, if any."""
        model = self._require_model()
        face_ids = set()
        comp = model.component(component_id)
        if not isinstance(comp, PlanarFace) and hasattr(comp, "faces"):
            face_ids = {f.face_id for f in comp.faces}
        for script in sorted(self.spec.tools, key=lambda s: s.start_frame):
            if script.component_id == component_id or script.component_id in face_ids:
                return script.start_frame
        return None

    # -- commands ---------------------------------------------------------

    def handle(self, kind: str, payload: dict) -> str:
        handlers = {
            "LoadMap": self.cmd_load_map,
            "LoadModel": self.cmd_load_model,
            "CycleCandidate": self.cmd_cycle_candidate,
            "Slide": self.cmd_slide,
            "Lock": self.cmd_lock,
            "SelectComponent": self.cmd_select_component,
            "MountTool": self.cmd_mount_tool,
            "SetInitialPose": self.cmd_set_initial_pose,
            "Refine": self.cmd_refine,
            "NudgeTool": self.cmd_nudge_tool,
            "MarkDone": self.cmd_mark_done,
            "SetTolerance": self.cmd_set_tolerance,
        }
        if kind not in handlers:
            raise ServiceError(f"unknown command kind '{kind}'")
        if not isinstance(payload, dict):
            raise ServiceError("payload must be an object")
        return handlers[kind](payload)

    def cmd_load_map(self, payload: dict) -> str:
        if self.tag_map is not None:
            raise ServiceError("map already loaded")
        self.tag_map = self._prebuilt_map
        self._emit(
            EventKind.MAP_LOADED,
            {"map_id": self.spec.name, "tag_count": len(self.tag_map.tags)},
        )
        self.phase = "mapped"
        return f"{len(self.tag_map.tags)} tags"

    def cmd_load_model(self, payload: dict) -> str:
        if self.tag_map is None:
            raise ServiceError("load the map before the model")
        if self.model is not None and self.model.locked:
            raise ServiceError("model already locked")
        text = payload.get("acim") or self._pristine
        model = parse_acim(text)
        candidates = register_to_map(model, self.tag_map)
        self.model = model
        self.log.header.model_hash = acim_hash(model)
        self.phase = "registering"
        self.selected = None
        return f"{len(candidates)} candidates"

    def cmd_cycle_candidate(self, payload: dict) -> str:
        model = self._require_model()
        cycle_candidate(model)
        self._emit(EventKind.CANDIDATE_CYCLED, {"index": model.reg_index})
        return f"candidate {model.reg_index}"

    def cmd_slide(self, payload: dict) -> str:
        model = self._require_model()
        offset = payload.get("offset")
        if not isinstance(offset, (int, float)) or not np.isfinite(offset):
            raise ServiceError("Slide needs a finite 'offset' in meters")
        slide_along_axis(model, float(offset))
        self._emit(EventKind.SLIDE_APPLIED, {"offset": float(offset)})
        return f"slide {model.slide_offset:+.4f} m"

    def cmd_lock(self, payload: dict) -> str:
        model = self._require_model()
        if model.locked:
            raise ServiceError("model already locked")
        lock(model)
        self._emit(
            EventKind.MODEL_LOCKED,
            {
                "acim": serialize_acim(model),
                "registration": pose_payload(model.registration.pose),
                "candidate_index": model.reg_index,
                "slide_offset": model.slide_offset,
            },
        )
        self.phase = "locked"
        return "locked"

    def cmd_select_component(self, payload: dict) -> str:
        model = self._require_locked()
        cid = payload.get("component_id")
        if not isinstance(cid, str) or not cid:
            raise ServiceError("SelectComponent needs 'component_id'")
        comp = model.component(cid)
        if isinstance(comp, PlanarFace):
            raise ServiceError(f"'{cid}' is a face; select its joint instead")
        if comp.state is State.DONE:
            raise ServiceError(f"'{cid}' is already done")
        set_state(model, cid, State.CURRENT)
        self._emit(EventKind.COMPONENT_SELECTED, {"component_id": cid})
        self.selected = cid
        preset = self._preset_frame(cid)
        if preset is not None:
            self.frame = min(preset, self.spec.path.frame_count - 1)
        self.phase = "guiding"
        return f"selected {cid}"

    def cmd_mount_tool(self, payload: dict) -> str:
        tid = payload.get("tool_id")
        if tid not in self._tools:
            raise ServiceError(f"unknown tool '{tid}'")
        tool = self._tools[tid]
        self._emit(
            EventKind.TOOL_MOUNTED, {"tool_id": tid, "acit": serialize_acit(tool)}
        )
        self.tool = tool
        self.tool_pose = None
        self.place_model = None
        return f"mounted {tid}"

    def cmd_set_initial_pose(self, payload: dict) -> str:
        self._require_locked()
        if self.tool is None:
            raise ServiceError("mount a tool first")
        params = _vec(payload, "params", 6)
        self.place_model = Pose(
            quat_from_rotvec(np.deg2rad(params[3:])), params[:3].copy()
        )
        self.tool_pose = set_initial_pose(self.tool, self._derived_ce())
        self._sample_pose()
        return "initial pose set"

    def cmd_refine(self, payload: dict) -> str:
        self._require_locked()
        if self.tool is None or self.place_model is None:
            raise ServiceError("mount a tool and set an initial pose first")
        place_tool_scene = self._place_tool_map().then(self._map_to_scene)
        seen = observe_toolhead_at(
            self.scene,
            self.scene.camera_pose(self.frame),
            place_tool_scene,
            self.tool,
            self.frame,
            self.intr,
        )
        self.tool_pose = refine_pose(self.tool, seen, self.tool_pose, self.intr)
        self._sample_pose()
        return f"refined from {len(seen)} points, rmse {self.tool_pose.reproj_rmse:.3f} px"

    def cmd_nudge_tool(self, payload: dict) -> str:
        self._require_locked()
        if self.tool is None or self.place_model is None:
            raise ServiceError("mount a tool and set an initial pose first")
        dt = (
            _vec(payload, "dt", 3)
            if payload.get("dt") is not None
            else np.zeros(3)
        )
        drot = (
            _vec(payload, "drot_deg", 3)
            if payload.get("drot_deg") is not None
            else np.zeros(3)
        )
        spin = Pose(quat_from_rotvec(np.deg2rad(drot)), np.zeros(3))
        moved = self.place_model.then(spin)
        self.place_model = Pose(moved.q, self.place_model.t + dt)
        self.tool_pose = set_initial_pose(self.tool, self._derived_ce())
        self._sample_pose()
        return "nudged"

    def cmd_mark_done(self, payload: dict) -> str:
        model = self._require_locked()
        cid = payload.get("component_id")
        if not isinstance(cid, str) or not cid:
            raise ServiceError("MarkDone needs 'component_id'")
        if self.selected is None:
            raise ServiceError("select a component first")
        if self.tool is None or self.tool_pose is None:
            raise ServiceError("mount a tool and set a pose before marking done")
        frame = self._feedback()
        self._sample_pose()
        self._emit(EventKind.FEEDBACK_EMITTED, feedback_payload(frame, self.selected))
        self._emit(
            EventKind.STATE_CHANGED, {"component_id": cid, "state": "done"}
        )
        set_state(model, cid, State.DONE)
        if cid == self.selected:
            self.selected = None
        return f"{cid} done"

    def cmd_set_tolerance(self, payload: dict) -> str:
        known = {f.name for f in dataclasses.fields(ToleranceProfile)}
        updates = {}
        for name, value in payload.items():
            if name not in known:
                raise ServiceError(f"unknown tolerance '{name}'")
            if not isinstance(value, (int, float)) or not value > 0:
                raise ServiceError(f"tolerance '{name}' must be a positive number")
            updates[name] = float(value)
        if not updates:
            raise ServiceError("SetTolerance needs at least one named value")
        self.tol = dataclasses.replace(self.tol, **updates)
        return f"updated {sorted(updates)}"

    # -- pushes -----------------------------------------------------------

    def advance(self) -> None:
        """One playback tick: the camera tours the mapping pass until the
        model locks; afterwards presets pin the frame."""
        if self.model is None or not self.model.locked:
            self.frame = (self.frame + 1) % max(self._n_map, 1)

    def snapshot(self) -> dict:
        self.push_seq += 1
        components: dict[str, str] = {}
        if self.model is not None:
            for joint in self.model.cuts:
                components[joint.joint_id] = joint.state.value
                for face in joint.faces:
                    components[face.face_id] = face.state.value
            for hole in self.model.holes:
                components[hole.hole_id] = hole.state.value

        loc = self._localize() if self.tag_map is not None else None
        if loc is None:
            loc_status = "none"
        elif isinstance(loc, LocalizationFailure):
            loc_status = loc.reason
        else:
            loc_status = "ok"

        frame = self._feedback()
        feedback = None
        if frame is not None:
            body = feedback_payload(frame, self.selected or "")
            feedback = {
                "status": frame.status,
                "kind": _FEEDBACK_KINDS.get(type(frame.payload)),
                "component_id": body["component_id"],
                "metrics": body["metrics"],
            }

        camera = None
        tool_placement = None
        if self.tag_map is not None:
            camera = pose_payload(self._camera_placement_map())
        if (
            self.model is not None
            and self.model.locked
            and self.place_model is not None
        ):
            tool_placement = pose_payload(self._place_tool_map())

        model = self.model
        return {
            "type": "push",
            "seq": self.push_seq,
            "phase": self.phase,
            "frame": self.frame,
            "beam_id": self._beam_id,
            "map_tags": None if self.tag_map is None else len(self.tag_map.tags),
            "locked": bool(model is not None and model.locked),
            "selected": self.selected,
            "tool_id": None if self.tool is None else self.tool.tool_id,
            "candidate_index": None if model is None else model.reg_index,
            "candidate_count": None if model is None else len(model.reg_candidates),
            "slide_offset": None if model is None else float(model.slide_offset),
            "localization": loc_status,
            "components": components,
            "feedback": feedback,
            "tolerances": dataclasses.asdict(self.tol),
            "camera": camera,
            "tool_placement": tool_placement,
            "geometry": self._geometry(),
        }


def _ack(seq, ok: bool, detail: str) -> dict:
    return {"type": "ack", "seq": seq, "ok": ok, "detail": detail}


async def run_service(
    spec: ScenarioSpec,
    model: ExecutionModel | None = None,
    *,
    port: int = 0,
    intr: CameraIntrinsics | None = None,
    tol: ToleranceProfile | None = None,
    on_ready=None,
    stop_event: asyncio.Event | None = None,
    push_interval: float = PUSH_INTERVAL,
) -> None:
    """Serve one session until stop_event is set (or forever)."""
    svc = SessionService(spec, model if model is not None else closure_model(), intr, tol)
    clients: set = set()
    mutator: list = [None]

    async def send_json(ws, obj) -> None:
        try:
            await ws.send(json.dumps(obj, sort_keys=True))
        except ConnectionClosed:
            pass

    async def handler(ws) -> None:
        clients.add(ws)
        try:
            async for raw in ws:
                if isinstance(raw, bytes):
                    await ws.close(code=1003, reason="binary frames unsupported")
                    break
                try:
                    msg = json.loads(raw)
                except json.JSONDecodeError as exc:
                    await send_json(ws, _ack(None, False, f"malformed json: {exc.msg}"))
                    continue
                if not isinstance(msg, dict) or "kind" not in msg or "seq" not in msg:
                    seq = msg.get("seq") if isinstance(msg, dict) else None
                    await send_json(
                        ws, _ack(seq, False, "command needs 'seq' and 'kind'")
                    )
                    continue
                seq = msg["seq"]
                if mutator[0] is not None and mutator[0] is not ws:
                    await send_json(
                        ws, _ack(seq, False, "read-only client: session has a driver")
                    )
                    continue
                mutator[0] = ws
                try:
                    detail = svc.handle(msg["kind"], msg.get("payload") or {})
                except COMMAND_ERRORS as exc:
                    await send_json(ws, _ack(seq, False, str(exc)))
                else:
                    await send_json(ws, _ack(seq, True, detail))
        except ConnectionClosed:
            pass
        finally:
            clients.discard(ws)
            if mutator[0] is ws:
                mutator[0] = None

    async def pusher() -> None:
        # broadcast never awaits a slow client, so one stalled reader
        # cannot hold up everyone else's state stream
        while True:
            await asyncio.sleep(push_interval)
            svc.advance()
            text = json.dumps(svc.snapshot(), sort_keys=True)
            broadcast(clients, text)

    async with websockets.serve(handler, "127.0.0.1", port) as server:
        actual = server.sockets[0].getsockname()[1]
        if on_ready is not None:
            on_ready(actual)
        task = asyncio.create_task(pusher())
        try:
            if stop_event is None:
                await asyncio.Future()
            else:
                await stop_event.wait()
        finally:
            task.cancel()
            with contextlib.suppress(asyncio.CancelledError):
                await task


class ServiceThread:
    """Run the service on a daemon thread; used by tests and demos.

    ``start`` blocks until the port is known; ``stop`` shuts the loop down.
    """

    def __init__(
        self,
        spec: ScenarioSpec,
        model: ExecutionModel | None = None,
        tol: ToleranceProfile | None = None,
        push_interval: float = PUSH_INTERVAL,
    ):
        self.spec = spec
        self.model = model
        self.tol = tol
        self.push_interval = push_interval
        self.port: int | None = None
        self._thread: threading.Thread | None = None
        self._loop: asyncio.AbstractEventLoop | None = None
        self._stop: asyncio.Event | None = None
        self._startup: queue.Queue = queue.Queue()

    def start(self) -> "ServiceThread":
        def runner() -> None:
            async def main() -> None:
                self._loop = asyncio.get_running_loop()
                self._stop = asyncio.Event()
                try:
                    await run_service(
                        self.spec,
                        self.model,
                        port=0,
                        tol=self.tol,
                        on_ready=self._startup.put,
                        stop_event=self._stop,
                        push_interval=self.push_interval,
                    )
                except BaseException as exc:  # surface startup failures
                    self._startup.put(exc)
                    raise

            asyncio.run(main())

        self._thread = threading.Thread(target=runner, daemon=True)
        self._thread.start()
        got = self._startup.get(timeout=60)
        if isinstance(got, BaseException):
            raise got
        self.port = got
        return self

    def stop(self) -> None:
        if self._loop is not None and self._stop is not None:
            self._loop.call_soon_threadsafe(self._stop.set)
        if self._thread is not None:
            self._thread.join(timeout=10)

    @property
    def url(self) -> str:
        return f"ws://127.0.0.1:{self.port}"

    def __enter__(self) -> "ServiceThread":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
