/**
 * Session log replay model.
 *
 * Parses the exported JSON-lines log (header line, then one event per
 * line) into a timeline the scrubber walks. Scrubbing to step k means
 * folding the first k events into a ReplayState; the fold is pure, so
 * jumping backwards just refolds from the start. Desk-scale logs are a
 * few dozen events, so no checkpointing is needed.
 */
import { z } from "zod";
import { posePayloadSchema } from "./protocol";
import type { PosePayload } from "./protocol";

export class ParseError extends Error {
  constructor(
    message: string,
    readonly line: number,
  ) {
    super(`line ${line}: ${message}`);
    this.name = "ParseError";
  }
}

const headerSchema = z.object({
  beam_id: z.string(),
  map_id: z.string(),
  model_hash: z.string(),
  tool_ids: z.array(z.string()),
});
export type LogHeader = z.infer<typeof headerSchema>;

export const EVENT_KINDS = [
  "MapLoaded",
  "ModelLocked",
  "ComponentSelected",
  "ToolMounted",
  "PoseSample",
  "FeedbackEmitted",
  "StateChanged",
  "CandidateCycled",
  "SlideApplied",
] as const;

const eventSchema = z.object({
  seq: z.number().int().min(1),
  timestamp: z.number().min(0),
  kind: z.enum(EVENT_KINDS),
  payload: z.record(z.string(), z.unknown()),
});
export type LogEvent = z.infer<typeof eventSchema>;

export interface Timeline {
  header: LogHeader | null;
  events: LogEvent[];
}

export function parseSessionLog(text: string): Timeline {
  const lines = text.split("\n");
  while (lines.length > 0 && lines[lines.length - 1]!.trim() === "") {
    lines.pop();
  }
  if (lines.length === 0) {
    return { header: null, events: [] };
  }
  const parseLine = (raw: string, lineNo: number): unknown => {
    try {
      return JSON.parse(raw);
    } catch (err) {
      throw new ParseError(`not JSON: ${(err as Error).message}`, lineNo);
    }
  };
  const headerResult = headerSchema.safeParse(parseLine(lines[0]!, 1));
  if (!headerResult.success) {
    throw new ParseError("bad header record", 1);
  }
  const events: LogEvent[] = [];
  for (let i = 1; i < lines.length; i++) {
    const result = eventSchema.safeParse(parseLine(lines[i]!, i + 1));
    if (!result.success) {
      const issue = result.error.issues[0];
      throw new ParseError(
        `bad event record (${issue ? issue.path.join(".") : "?"})`,
        i + 1,
      );
    }
    events.push(result.data);
  }
  return { header: headerResult.data, events };
}

export interface PoseSample {
  toolId: string;
  camInTimber: PosePayload;
  toolInCam: PosePayload;
}

export interface ReplayFeedback {
  componentId: string;
  status: string;
  metrics: Record<string, unknown>;
}

export interface ReplayState {
  step: number;
  mapId: string | null;
  locked: boolean;
  selected: string | null;
  toolId: string | null;
  componentStates: Record<string, string>;
  /** Camera positions in the timber frame, one per pose sample so far. */
  trajectory: Array<[number, number, number]>;
  lastSample: PoseSample | null;
  lastFeedback: ReplayFeedback | null;
  candidateIndex: number | null;
  slideOffset: number;
}

function initialReplay(): ReplayState {
  return {
    step: 0,
    mapId: null,
    locked: false,
    selected: null,
    toolId: null,
    componentStates: {},
    trajectory: [],
    lastSample: null,
    lastFeedback: null,
    candidateIndex: null,
    slideOffset: 0,
  };
}

const sampleSchema = z.object({
  tool_id: z.string(),
  cam_in_timber: posePayloadSchema,
  tool_in_cam: posePayloadSchema,
});

const feedbackEventSchema = z.object({
  component_id: z.string(),
  status: z.string(),
  metrics: z.record(z.string(), z.unknown()),
});

function applyEvent(state: ReplayState, event: LogEvent): void {
  const payload = event.payload;
  switch (event.kind) {
    case "MapLoaded":
      state.mapId = typeof payload.map_id === "string" ? payload.map_id : null;
      break;
    case "ModelLocked": {
      state.locked = true;
      const index = payload.candidate_index;
      state.candidateIndex = typeof index === "number" ? index : null;
      const slide = payload.slide_offset;
      state.slideOffset = typeof slide === "number" ? slide : 0;
      break;
    }
    case "ComponentSelected": {
      const id = payload.component_id;
      if (typeof id === "string") {
        state.selected = id;
        state.componentStates[id] = "current";
      }
      break;
    }
    case "ToolMounted": {
      const text = payload.acit;
      if (typeof text === "string") {
        const match = /id="([^"]+)"/.exec(text);
        state.toolId = match?.[1] ?? null;
      }
      break;
    }
    case "PoseSample": {
      const sample = sampleSchema.safeParse(payload);
      if (sample.success) {
        state.lastSample = {
          toolId: sample.data.tool_id,
          camInTimber: sample.data.cam_in_timber,
          toolInCam: sample.data.tool_in_cam,
        };
        state.trajectory.push([...sample.data.cam_in_timber.t]);
      }
      break;
    }
    case "FeedbackEmitted": {
      const frame = feedbackEventSchema.safeParse(payload);
      if (frame.success) {
        state.lastFeedback = {
          componentId: frame.data.component_id,
          status: frame.data.status,
          metrics: frame.data.metrics,
        };
      }
      break;
    }
    case "StateChanged": {
      const id = payload.component_id;
      const next = payload.state;
      if (typeof id === "string" && typeof next === "string") {
        state.componentStates[id] = next;
        if (next === "done" && state.selected === id) {
          state.selected = null;
        }
      }
      break;
    }
    case "CandidateCycled": {
      const index = payload.index;
      state.candidateIndex = typeof index === "number" ? index : null;
      break;
    }
    case "SlideApplied": {
      // Each event carries the delta; the cumulative total only appears
      // in the ModelLocked payload.
      const offset = payload.offset;
      if (typeof offset === "number") {
        state.slideOffset += offset;
      }
      break;
    }
  }
}

/** State after the first k events; k beyond the end clamps to the end. */
export function stateAt(timeline: Timeline, k: number): ReplayState {
  const upTo = Math.max(0, Math.min(k, timeline.events.length));
  const state = initialReplay();
  for (let i = 0; i < upTo; i++) {
    applyEvent(state, timeline.events[i]!);
  }
  state.step = upTo;
  return state;
}
