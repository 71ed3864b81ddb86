/** Pixel-buffer construction for the observation and heatmap canvases.
 *
 * Buffers are plain RGBA arrays derived 1:1 from fetched tensors, kept on
 * the element (`dataset`-adjacent property) so tests can assert exactly what
 * would be drawn even when the 2-D canvas context is unavailable.
 */

import { Tensor } from "./api.js";

// distinct colors for entity ids 1..9; id 0 (background) is dark gray
const ENTITY_COLORS: [number, number, number][] = [
  [40, 40, 40],
  [230, 80, 80],
  [80, 160, 230],
  [90, 200, 120],
  [240, 200, 80],
  [200, 120, 220],
  [250, 140, 60],
  [120, 220, 220],
  [180, 180, 120],
  [150, 110, 90],
];

export function entityImageRgba(image: Tensor): Uint8ClampedArray<ArrayBuffer> {
  const [h, w] = image.shape;
  const out = new Uint8ClampedArray(h * w * 4);
  for (let i = 0; i < h * w; i++) {
    const id = Number(image.data[i]);
    const [r, g, b] = ENTITY_COLORS[id % ENTITY_COLORS.length];
    out[4 * i] = r;
    out[4 * i + 1] = g;
    out[4 * i + 2] = b;
    out[4 * i + 3] = 255;
  }
  return out;
}

/** Server previews are already quantized grayscale bytes; map 1:1. */
export function heatmapRgba(overlay: Tensor): Uint8ClampedArray<ArrayBuffer> {
  const [h, w] = overlay.shape;
  const out = new Uint8ClampedArray(h * w * 4);
  for (let i = 0; i < h * w; i++) {
    const v = Number(overlay.data[i]);
    out[4 * i] = v;
    out[4 * i + 1] = v;
    out[4 * i + 2] = v;
    out[4 * i + 3] = 255;
  }
  return out;
}

export interface DrawnCanvas extends HTMLCanvasElement {
  /** Last buffer handed to the canvas; single source of truth for tests. */
  drawnPixels?: Uint8ClampedArray<ArrayBuffer>;
  drawnShape?: [number, number];
}

export function drawRgba(
  canvas: DrawnCanvas,
  rgba: Uint8ClampedArray<ArrayBuffer>,
  h: number,
  w: number,
): void {
  canvas.width = w;
  canvas.height = h;
  canvas.drawnPixels = rgba;
  canvas.drawnShape = [h, w];
  const ctx = canvas.getContext("2d");
  if (ctx) {
    ctx.putImageData(new ImageData(rgba, w, h), 0, 0);
  }
}
