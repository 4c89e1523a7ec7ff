/** Shared loaders for the recorded protocol and session-log fixtures. */
import { readFileSync } from "node:fs";
import { dirname, join } from "node:path";
import { fileURLToPath } from "node:url";
import { parseServerMessage } from "../src/protocol";
import type { Ack, StatePush } from "../src/protocol";

export const DATA_DIR = join(dirname(fileURLToPath(import.meta.url)), "data");

export function readFixture(name: string): string {
  return readFileSync(join(DATA_DIR, name), "utf-8");
}

export function capturedPush(name: string): StatePush {
  const message = parseServerMessage(readFixture(join("captured", name)));
  if (message.type !== "push") {
    throw new Error(`${name} is not a push`);
  }
  return message;
}

export function capturedAck(name: string): Ack {
  const message = parseServerMessage(readFixture(join("captured", name)));
  if (message.type !== "ack") {
    throw new Error(`${name} is not an ack`);
  }
  return message;
}
