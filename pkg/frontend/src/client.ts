/**
 * WebSocket session client.
 *
 * The socket is injected as a factory so tests can drive the client with
 * the `ws` package under node while the browser passes the native
 * WebSocket. All incoming messages funnel through the view-state reducer;
 * subscribers re-render from the result.
 */
import { encodeCommand, parseServerMessage, ProtocolError } from "./protocol";
import type { CommandKind } from "./protocol";
import {
  checkTimeout,
  initialView,
  onAck,
  onClose,
  onOpen,
  onPush,
  onSent,
} from "./viewstate";
import type { ViewState } from "./viewstate";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  addEventListener(
    type: "open" | "close" | "message",
    listener: (event: { data?: unknown }) => void,
  ): void;
}

export type SocketFactory = (url: string) => SocketLike;

export class SessionClient {
  private view: ViewState = initialView();
  private socket: SocketLike | null = null;
  private seq = 0;
  private listeners: Array<(view: ViewState) => void> = [];
  /** Messages that failed to parse; kept for the diagnostics footer. */
  readonly faults: string[] = [];

  constructor(
    private readonly factory: SocketFactory,
    private readonly clock: () => number = () => Date.now(),
  ) {}

  connect(url: string): void {
    const socket = this.factory(url);
    this.socket = socket;
    socket.addEventListener("open", () => this.apply(onOpen));
    socket.addEventListener("close", () => this.apply(onClose));
    socket.addEventListener("message", (event) => {
      this.receive(String(event.data));
    });
  }

  disconnect(): void {
    this.socket?.close();
    this.socket = null;
  }

  state(): ViewState {
    return this.view;
  }

  onChange(listener: (view: ViewState) => void): void {
    this.listeners.push(listener);
  }

  /** Sends one command and returns its seq for ack pairing. */
  send(kind: CommandKind, payload: Record<string, unknown> = {}): number {
    if (this.socket === null || !this.view.connected) {
      throw new Error("not connected");
    }
    this.seq += 1;
    this.socket.send(encodeCommand(this.seq, kind, payload));
    const seq = this.seq;
    this.apply((view) => onSent(view, seq, kind, this.clock()));
    return seq;
  }

  /** Render-loop tick: promotes an overdue command to the retry prompt. */
  tick(): void {
    this.apply((view) => checkTimeout(view, this.clock()));
  }

  private receive(text: string): void {
    let message;
    try {
      message = parseServerMessage(text);
    } catch (err) {
      if (err instanceof ProtocolError) {
        this.faults.push(err.message);
        return;
      }
      throw err;
    }
    if (message.type === "ack") {
      this.apply((view) => onAck(view, message));
    } else {
      this.apply((view) => onPush(view, message));
    }
  }

  private apply(step: (view: ViewState) => ViewState): void {
    const next = step(this.view);
    if (next === this.view) {
      return;
    }
    this.view = next;
    for (const listener of this.listeners) {
      listener(next);
    }
  }
}
