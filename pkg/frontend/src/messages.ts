// Wire schema shared with the teleop server; field names are the contract.

export interface StateMessage {
  type: "state";
  t: number;
  ee: [number, number];
  block: [number, number, number];
  keypoints: [number, number][];
  goal_keypoints: [number, number][];
  coverage: number;
  ball?: [number, number];
}

export interface AckMessage {
  type: "ack";
  cmd: "hello" | "start" | "save" | "discard";
  session?: number;
  seed?: number;
  variant?: string;
  steps?: number;
  count?: number;
  workspace?: number;
}

export interface ErrorMessage {
  type: "error";
  message: string;
}

export type ServerMessage = StateMessage | AckMessage | ErrorMessage;

export interface ActionMessage {
  type: "action";
  target: [number, number];
}

export interface EpisodeCmdMessage {
  type: "episode_cmd";
  cmd: "start" | "save" | "discard";
  variant?: string;
  seed?: number;
}

export type ClientMessage = ActionMessage | EpisodeCmdMessage;

export function parseServerMessage(raw: string): ServerMessage | null {
  try {
    const msg = JSON.parse(raw);
    if (msg && (msg.type === "state" || msg.type === "ack" || msg.type === "error")) {
      return msg as ServerMessage;
    }
    return null;
  } catch {
    return null;
  }
}
