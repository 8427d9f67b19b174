// Episode state machine and socket plumbing. UI state changes only on
// server acks; the mouse target is throttled to one message per tick.

import { ClientMessage, ServerMessage } from "./messages.js";

export type EpisodeStatus = "idle" | "pending_start" | "active" | "pending_save" | "pending_discard";

export interface Notice {
  kind: "info" | "error";
  text: string;
}

export class EpisodeStateMachine {
  status: EpisodeStatus = "idle";
  savedCount = 0;
  lastNotice: Notice | null = null;

  canStart(): boolean {
    return this.status === "idle";
  }

  canFinish(): boolean {
    return this.status === "active";
  }

  request(cmd: "start" | "save" | "discard"): boolean {
    if (cmd === "start" && this.canStart()) {
      this.status = "pending_start";
      return true;
    }
    if ((cmd === "save" || cmd === "discard") && this.canFinish()) {
      this.status = cmd === "save" ? "pending_save" : "pending_discard";
      return true;
    }
    return false;
  }

  onServerMessage(msg: ServerMessage): void {
    if (msg.type === "ack") {
      if (msg.cmd === "start") {
        this.status = "active";
        this.lastNotice = { kind: "info", text: `recording (seed ${msg.seed})` };
      } else if (msg.cmd === "save") {
        this.status = "idle";
        this.savedCount = msg.count ?? this.savedCount + 1;
        this.lastNotice = { kind: "info", text: `saved episode #${this.savedCount} (${msg.steps} steps)` };
      } else if (msg.cmd === "discard") {
        this.status = "idle";
        this.lastNotice = { kind: "info", text: "episode discarded" };
      }
    } else if (msg.type === "error") {
      // failed transitions fall back to the last stable state
      if (this.status === "pending_start") this.status = "idle";
      if (this.status === "pending_save" || this.status === "pending_discard") this.status = "active";
      this.lastNotice = { kind: "error", text: msg.message };
    }
  }

  onDisconnect(): void {
    if (this.status !== "idle") {
      this.lastNotice = { kind: "error", text: "connection lost: episode discarded" };
    }
    this.status = "idle";
  }
}

export class TargetThrottle {
  private lastSent = -Infinity;

  constructor(private intervalMs: number) {}

  // returns the message to send, or null when inside the throttle window
  next(target: [number, number], nowMs: number): ClientMessage | null {
    if (nowMs - this.lastSent < this.intervalMs) return null;
    this.lastSent = nowMs;
    return { type: "action", target };
  }
}
