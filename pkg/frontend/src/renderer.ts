// Canvas drawing from server state messages. Every rendered quantity comes
// straight from the message (keypoints, ee, ball, coverage); the client
// computes nothing but the view transform.

import { StateMessage } from "./messages.js";
import { ViewTransform, toPixels } from "./transform.js";

export const EE_RADIUS = 15;
export const BALL_RADIUS = 12;

// Minimal slice of CanvasRenderingContext2D used here; tests substitute a
// recording fake.
export interface DrawContext {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  font: string;
  clearRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  closePath(): void;
  fill(): void;
  stroke(): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  fillText(text: string, x: number, y: number): void;
  strokeRect(x: number, y: number, w: number, h: number): void;
}

function tracePolygon(ctx: DrawContext, t: ViewTransform, pts: [number, number][]): void {
  ctx.beginPath();
  pts.forEach(([wx, wy], i) => {
    const [px, py] = toPixels(t, wx, wy);
    if (i === 0) ctx.moveTo(px, py);
    else ctx.lineTo(px, py);
  });
  ctx.closePath();
}

export function render(ctx: DrawContext, t: ViewTransform, msg: StateMessage,
                       canvasW: number, canvasH: number): void {
  ctx.clearRect(0, 0, canvasW, canvasH);

  // workspace frame
  const [x0, y0] = toPixels(t, 0, 0);
  ctx.strokeStyle = "#888";
  ctx.lineWidth = 1;
  ctx.strokeRect(x0, y0, 500 * t.scale, 500 * t.scale);

  // goal T as an outline (first 8 keypoints trace the outline corners)
  ctx.strokeStyle = "#2a9d2a";
  ctx.lineWidth = 2;
  tracePolygon(ctx, t, msg.goal_keypoints.slice(0, 8));
  ctx.stroke();

  // block T filled from its outline keypoints
  ctx.fillStyle = "rgba(120, 120, 220, 0.85)";
  tracePolygon(ctx, t, msg.keypoints.slice(0, 8));
  ctx.fill();

  // end-effector disc
  const [ex, ey] = toPixels(t, msg.ee[0], msg.ee[1]);
  ctx.fillStyle = "#d04040";
  ctx.beginPath();
  ctx.arc(ex, ey, EE_RADIUS * t.scale, 0, 2 * Math.PI);
  ctx.fill();

  // ball only when the server reports one
  if (msg.ball) {
    const [bx, by] = toPixels(t, msg.ball[0], msg.ball[1]);
    ctx.fillStyle = "#e8972a";
    ctx.beginPath();
    ctx.arc(bx, by, BALL_RADIUS * t.scale, 0, 2 * Math.PI);
    ctx.fill();
  }

  ctx.fillStyle = "#111";
  ctx.font = "16px sans-serif";
  ctx.fillText(`coverage ${(msg.coverage * 100).toFixed(1)}%  t=${msg.t}`, x0 + 4, y0 - 6);
}
