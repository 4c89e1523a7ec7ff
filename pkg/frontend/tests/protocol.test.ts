/**
 * Wire-protocol parsing against messages recorded from a live service.
 * The fixtures are verbatim WebSocket payloads, so these tests pin the
 * client to the shapes the server actually sends.
 */
import { describe, expect, it } from "vitest";
import {
  COMMAND_KINDS,
  encodeCommand,
  parseServerMessage,
  ProtocolError,
} from "../src/protocol";
import { capturedAck, capturedPush } from "./fixtures";

describe("server message parsing", () => {
  it("reads a recorded ok ack", () => {
    const ack = capturedAck("ack_ok.json");
    expect(ack.ok).toBe(true);
    expect(ack.seq).toBe(1);
    expect(ack.detail).toContain("tags");
  });

  it("reads a recorded error ack and keeps the detail text", () => {
    const ack = capturedAck("ack_error.json");
    expect(ack.ok).toBe(false);
    expect(ack.detail).toContain("unknown command");
  });

  it("reads the idle push with its nullable fields", () => {
    const push = capturedPush("push_idle.json");
    expect(push.locked).toBe(false);
    expect(push.map_tags).toBeNull();
    expect(push.candidate_index).toBeNull();
    expect(push.feedback).toBeNull();
    expect(push.geometry).toBeNull();
    expect(push.camera).toBeNull();
    expect(push.localization).toBe("none");
  });

  it("reads a registering push carrying map-frame geometry", () => {
    const push = capturedPush("push_registering.json");
    expect(push.locked).toBe(false);
    expect(push.geometry).not.toBeNull();
    expect(push.geometry!.corners).toHaveLength(8);
    expect(Object.keys(push.geometry!.faces)).toContain("lap1_seat");
    expect(Object.keys(push.geometry!.holes)).toContain("peg1");
    expect(push.geometry!.holes.peg1!.radius).toBeCloseTo(0.008, 6);
  });

  it("reads guidance pushes with drill and cut feedback", () => {
    const drill = capturedPush("push_drill_green.json");
    expect(drill.feedback!.kind).toBe("drill");
    expect(drill.feedback!.metrics.all_green).toBe(true);
    expect(drill.feedback!.metrics.within).toEqual({
      angle: true,
      depth: true,
      start: true,
    });
    expect(drill.tool_placement).not.toBeNull();

    const cut = capturedPush("push_cut.json");
    expect(cut.feedback!.kind).toBe("cut");
    expect(typeof cut.feedback!.metrics.position_error).toBe("number");
    expect(cut.feedback!.metrics.face_id).toBe("lap1_seat");
  });

  it("rejects junk and near-miss messages with ProtocolError", () => {
    expect(() => parseServerMessage("{nope")).toThrow(ProtocolError);
    expect(() => parseServerMessage('{"type":"mystery"}')).toThrow(ProtocolError);
    const push = capturedPush("push_idle.json");
    const broken = { ...push, seq: "one" };
    expect(() => parseServerMessage(JSON.stringify(broken))).toThrow(
      ProtocolError,
    );
  });

  it("encodes commands as seq/kind/payload objects", () => {
    const text = encodeCommand(7, "SelectComponent", { component_id: "peg1" });
    expect(JSON.parse(text)).toEqual({
      seq: 7,
      kind: "SelectComponent",
      payload: { component_id: "peg1" },
    });
    expect(COMMAND_KINDS).toContain("NudgeTool");
    expect(COMMAND_KINDS).toHaveLength(12);
  });
});
