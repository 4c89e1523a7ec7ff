/**
 * Client view state: a thin shell around the latest server snapshot.
 *
 * The server is the single source of truth. Commands never mutate the view
 * directly; changes only appear when the next push arrives, so there is no
 * optimistic state to roll back. The only client-owned facts are the socket
 * status and the one in-flight command awaiting its ack.
 */
import type { Ack, CommandKind, StatePush } from "./protocol";

export const ACK_TIMEOUT_MS = 2000;

export interface PendingCommand {
  seq: number;
  kind: CommandKind;
  sentAt: number;
}

export interface ViewState {
  connected: boolean;
  /** Latest snapshot; everything below the toolbar renders from this. */
  push: StatePush | null;
  /** Command sent but not yet acked. At most one at a time. */
  pending: PendingCommand | null;
  lastAck: Ack | null;
  /** Command whose ack never came: the UI offers a retry. */
  stale: PendingCommand | null;
}

export function initialView(): ViewState {
  return { connected: false, push: null, pending: null, lastAck: null, stale: null };
}

export function onOpen(state: ViewState): ViewState {
  return { ...state, connected: true };
}

export function onClose(state: ViewState): ViewState {
  return { ...state, connected: false, pending: null };
}

export function onSent(
  state: ViewState,
  seq: number,
  kind: CommandKind,
  now: number,
): ViewState {
  return { ...state, pending: { seq, kind, sentAt: now }, stale: null };
}

/** Replaces the snapshot. Out-of-order frames (lower seq) are dropped. */
export function onPush(state: ViewState, push: StatePush): ViewState {
  if (state.push !== null && push.seq <= state.push.seq) {
    return state;
  }
  return { ...state, push };
}

export function onAck(state: ViewState, ack: Ack): ViewState {
  const pending =
    state.pending !== null && ack.seq === state.pending.seq
      ? null
      : state.pending;
  return { ...state, pending, lastAck: ack };
}

/**
 * Ticked by the render loop. A command unacked past the timeout is moved
 * to `stale`, which the panel surfaces as a retry prompt.
 */
export function checkTimeout(state: ViewState, now: number): ViewState {
  if (state.pending === null || now - state.pending.sentAt < ACK_TIMEOUT_MS) {
    return state;
  }
  return { ...state, pending: null, stale: state.pending };
}

export function selectedComponent(state: ViewState): string | null {
  return state.push?.selected ?? null;
}

export function toleranceDisplay(state: ViewState): Record<string, number> {
  return state.push?.tolerances ?? {};
}

export function localizationOk(state: ViewState): boolean {
  return state.push?.localization === "ok";
}

/** Banner text, or null when nothing needs attention. */
export function bannerText(state: ViewState): string | null {
  if (!state.connected) {
    return "disconnected";
  }
  if (state.stale !== null) {
    return `no reply to ${state.stale.kind}, retry?`;
  }
  const push = state.push;
  if (push !== null && push.localization !== "ok" && push.localization !== "none") {
    return `localization lost: ${push.localization}`;
  }
  return null;
}
