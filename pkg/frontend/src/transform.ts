// Workspace <-> canvas pixel mapping. The scene is a square workspace; the
// canvas may have margins. No physics lives here: pure coordinate algebra.

export const WORKSPACE = 500;

export interface ViewTransform {
  scale: number;
  offsetX: number;
  offsetY: number;
}

export function makeTransform(canvasW: number, canvasH: number, margin = 10): ViewTransform {
  const side = Math.min(canvasW, canvasH) - 2 * margin;
  const scale = side / WORKSPACE;
  return {
    scale,
    offsetX: (canvasW - side) / 2,
    offsetY: (canvasH - side) / 2,
  };
}

export function toPixels(t: ViewTransform, wx: number, wy: number): [number, number] {
  return [t.offsetX + wx * t.scale, t.offsetY + wy * t.scale];
}

export function toWorkspace(t: ViewTransform, px: number, py: number): [number, number] {
  return [(px - t.offsetX) / t.scale, (py - t.offsetY) / t.scale];
}

export function clampWorkspace(x: number, y: number): [number, number] {
  return [Math.min(WORKSPACE, Math.max(0, x)), Math.min(WORKSPACE, Math.max(0, y))];
}
