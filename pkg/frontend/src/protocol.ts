/**
 * Wire protocol for the live session service.
 *
 * Every message is one UTF-8 JSON text frame. The client sends commands
 * {seq, kind, payload}; the server answers each command with exactly one
 * ack carrying the same seq, and independently streams state pushes.
 * Pushes are self-contained snapshots: rendering the latest one is always
 * correct, no matter how many were missed.
 */
import { z } from "zod";

export class ProtocolError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "ProtocolError";
  }
}

const vec3 = z.tuple([z.number(), z.number(), z.number()]);

/** Rigid placement payload: unit quaternion [w,x,y,z] plus translation. */
export const posePayloadSchema = z.object({
  q: z.tuple([z.number(), z.number(), z.number(), z.number()]),
  t: vec3,
});
export type PosePayload = z.infer<typeof posePayloadSchema>;

export const ackSchema = z.object({
  type: z.literal("ack"),
  seq: z.number().nullable(),
  ok: z.boolean(),
  detail: z.string(),
});
export type Ack = z.infer<typeof ackSchema>;

/**
 * Guidance numbers for the selected component. `within` and `all_green`
 * are the server's verdicts; clients must echo them, never recompute.
 * When localization drops mid-guidance the frame carries no payload:
 * kind is null and the metrics object is empty.
 */
const metricsSchema = z
  .object({
    within: z.record(z.string(), z.boolean()).optional(),
    all_green: z.boolean().optional(),
  })
  .catchall(z.union([z.number(), z.string()]));
export type Metrics = z.infer<typeof metricsSchema>;

export const feedbackSchema = z.object({
  component_id: z.string(),
  status: z.string(),
  kind: z.enum(["cut", "chainsaw", "drill"]).nullable(),
  metrics: metricsSchema,
});
export type Feedback = z.infer<typeof feedbackSchema>;

/** Model geometry re-expressed in the map frame for remote rendering. */
export const geometrySchema = z.object({
  corners: z.array(vec3).length(8),
  faces: z.record(
    z.string(),
    z.object({ joint_id: z.string(), polygon: z.array(vec3).min(3) }),
  ),
  holes: z.record(
    z.string(),
    z.object({ start: vec3, end: vec3, radius: z.number() }),
  ),
});
export type Geometry = z.infer<typeof geometrySchema>;

export const statePushSchema = z.object({
  type: z.literal("push"),
  seq: z.number(),
  phase: z.string(),
  frame: z.number(),
  beam_id: z.string(),
  map_tags: z.number().nullable(),
  locked: z.boolean(),
  selected: z.string().nullable(),
  tool_id: z.string().nullable(),
  candidate_index: z.number().nullable(),
  candidate_count: z.number().nullable(),
  slide_offset: z.number().nullable(),
  localization: z.string(),
  components: z.record(z.string(), z.string()),
  feedback: feedbackSchema.nullable(),
  tolerances: z.record(z.string(), z.number()),
  camera: posePayloadSchema.nullable(),
  tool_placement: posePayloadSchema.nullable(),
  geometry: geometrySchema.nullable(),
});
export type StatePush = z.infer<typeof statePushSchema>;

const serverMessageSchema = z.discriminatedUnion("type", [
  ackSchema,
  statePushSchema,
]);
export type ServerMessage = Ack | StatePush;

export function parseServerMessage(text: string): ServerMessage {
  let data: unknown;
  try {
    data = JSON.parse(text);
  } catch (err) {
    throw new ProtocolError(`message is not JSON: ${(err as Error).message}`);
  }
  const result = serverMessageSchema.safeParse(data);
  if (!result.success) {
    const issue = result.error.issues[0];
    const where = issue ? issue.path.join(".") : "";
    const what = issue ? issue.message : "unknown issue";
    throw new ProtocolError(`bad server message at '${where}': ${what}`);
  }
  return result.data;
}

export const COMMAND_KINDS = [
  "LoadMap",
  "LoadModel",
  "CycleCandidate",
  "Slide",
  "Lock",
  "SelectComponent",
  "MountTool",
  "SetInitialPose",
  "Refine",
  "NudgeTool",
  "MarkDone",
  "SetTolerance",
] as const;
export type CommandKind = (typeof COMMAND_KINDS)[number];

export interface SessionCommand {
  seq: number;
  kind: CommandKind;
  payload: Record<string, unknown>;
}

export function encodeCommand(
  seq: number,
  kind: CommandKind,
  payload: Record<string, unknown> = {},
): string {
  return JSON.stringify({ seq, kind, payload });
}
