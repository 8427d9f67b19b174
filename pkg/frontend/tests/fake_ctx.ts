// Recording stand-in for CanvasRenderingContext2D.

import { DrawContext } from "../src/renderer.js";

export interface Shape {
  kind: "polygon" | "arc" | "text";
  points: [number, number][];
  filled: boolean;
  style: string;
  text?: string;
}

export class FakeContext implements DrawContext {
  fillStyle: string = "";
  strokeStyle: string = "";
  lineWidth = 1;
  font = "";
  shapes: Shape[] = [];
  cleared = 0;
  private path: [number, number][] = [];
  private arcs: [number, number, number][] = [];

  clearRect(): void {
    this.cleared += 1;
  }
  beginPath(): void {
    this.path = [];
    this.arcs = [];
  }
  moveTo(x: number, y: number): void {
    this.path.push([x, y]);
  }
  lineTo(x: number, y: number): void {
    this.path.push([x, y]);
  }
  closePath(): void {}
  arc(x: number, y: number, r: number): void {
    this.arcs.push([x, y, r]);
  }
  private flush(filled: boolean, style: string): void {
    if (this.path.length) {
      this.shapes.push({ kind: "polygon", points: [...this.path], filled, style });
    }
    for (const [x, y, r] of this.arcs) {
      this.shapes.push({ kind: "arc", points: [[x, y], [r, r]], filled, style });
    }
  }
  fill(): void {
    this.flush(true, String(this.fillStyle));
  }
  stroke(): void {
    this.flush(false, String(this.strokeStyle));
  }
  fillText(text: string, x: number, y: number): void {
    this.shapes.push({ kind: "text", points: [[x, y]], filled: true, style: String(this.fillStyle), text });
  }
  strokeRect(): void {}
}
