// Page wiring: socket, canvas, mouse teleop, episode buttons.

import { EpisodeStateMachine, TargetThrottle } from "./client.js";
import { parseServerMessage, StateMessage } from "./messages.js";
import { clampWorkspace, makeTransform, toWorkspace } from "./transform.js";
import { render } from "./renderer.js";

const canvas = document.getElementById("scene") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const statusEl = document.getElementById("status")!;
const noticeEl = document.getElementById("notice")!;
const startBtn = document.getElementById("start") as HTMLButtonElement;
const saveBtn = document.getElementById("save") as HTMLButtonElement;
const discardBtn = document.getElementById("discard") as HTMLButtonElement;

const transform = makeTransform(canvas.width, canvas.height);
const machine = new EpisodeStateMachine();
const throttle = new TargetThrottle(100); // one target per server tick at 10 Hz
let lastState: StateMessage | null = null;

const ws = new WebSocket(`ws://${location.host}/teleop`);

function refreshControls(): void {
  startBtn.disabled = !machine.canStart();
  saveBtn.disabled = !machine.canFinish();
  discardBtn.disabled = !machine.canFinish();
  statusEl.textContent = machine.status;
  if (machine.lastNotice) {
    noticeEl.textContent = machine.lastNotice.text;
    noticeEl.className = machine.lastNotice.kind;
  }
}

ws.onmessage = (ev: MessageEvent) => {
  const msg = parseServerMessage(ev.data as string);
  if (!msg) {
    noticeEl.textContent = "malformed server message";
    noticeEl.className = "error";
    return;
  }
  if (msg.type === "state") {
    lastState = msg;
    render(ctx, transform, msg, canvas.width, canvas.height);
  } else {
    machine.onServerMessage(msg);
    refreshControls();
  }
};

ws.onclose = () => {
  machine.onDisconnect();
  refreshControls();
};

canvas.addEventListener("mousemove", (ev: MouseEvent) => {
  if (!machine.canFinish()) return; // teleop only during an active episode
  const rect = canvas.getBoundingClientRect();
  const [wx, wy] = toWorkspace(transform, ev.clientX - rect.left, ev.clientY - rect.top);
  const msg = throttle.next(clampWorkspace(wx, wy), performance.now());
  if (msg && ws.readyState === WebSocket.OPEN) ws.send(JSON.stringify(msg));
});

startBtn.onclick = () => {
  if (machine.request("start")) ws.send(JSON.stringify({ type: "episode_cmd", cmd: "start" }));
  refreshControls();
};
saveBtn.onclick = () => {
  if (machine.request("save")) ws.send(JSON.stringify({ type: "episode_cmd", cmd: "save" }));
  refreshControls();
};
discardBtn.onclick = () => {
  if (machine.request("discard")) ws.send(JSON.stringify({ type: "episode_cmd", cmd: "discard" }));
  refreshControls();
};

refreshControls();
