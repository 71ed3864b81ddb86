/** Session view state: everything the UI shows, nothing computed locally.
 *
 * Invariant: `overlays` always corresponds to the last server-acknowledged
 * task representation (`representationId`), never to unsent clicks, which
 * live separately in `pendingClicks`.
 */

import { decodeTensor, Tensor, WireTensor } from "./api.js";

export interface PendingClick {
  camera: string;
  pixel: [number, number];
}

export interface SessionView {
  sessionId: string;
  template: string;
  seed: number;
  instruction: string;
  affordanceTypes: string[];
  entityImages: Record<string, Tensor>; // camera -> (H, W) int image
  depthImages: Record<string, Tensor>;
  selectedAffordance: string;
  selectedCamera: string;
  pendingClicks: Record<string, PendingClick>; // affordance -> click
  representationId: string | null;
  overlays: Record<string, Record<string, Tensor>> | null; // camera -> channel
  selectedChannel: string;
  frameIndex: number;
  eventLog: string[];
  done: boolean;
  busy: boolean;
}

export function initialView(
  sessionId: string,
  template: string,
  seed: number,
  instruction: string,
  affordanceTypes: string[],
  views: Record<string, { entity_id: WireTensor; depth: WireTensor }>,
): SessionView {
  const entityImages: Record<string, Tensor> = {};
  const depthImages: Record<string, Tensor> = {};
  for (const [camera, view] of Object.entries(views)) {
    entityImages[camera] = decodeTensor(view.entity_id);
    depthImages[camera] = decodeTensor(view.depth);
  }
  const cameras = Object.keys(views).sort();
  // the overhead view is the primary interaction surface in a planar world
  const primary = cameras.includes("topdown") ? "topdown" : cameras[0];
  return {
    sessionId,
    template,
    seed,
    instruction,
    affordanceTypes,
    entityImages,
    depthImages,
    selectedAffordance: affordanceTypes[0],
    selectedCamera: primary,
    pendingClicks: {},
    representationId: null,
    overlays: null,
    selectedChannel: affordanceTypes[0],
    frameIndex: 0,
    eventLog: [],
    done: false,
    busy: false,
  };
}

export function recordClick(view: SessionView, pixel: [number, number]): void {
  view.pendingClicks[view.selectedAffordance] = {
    camera: view.selectedCamera,
    pixel,
  };
}

export function clearSlot(view: SessionView, affordance: string): void {
  delete view.pendingClicks[affordance];
}

export function acceptSpec(
  view: SessionView,
  representationId: string,
  heatmaps: Record<string, Record<string, WireTensor>>,
): void {
  const overlays: Record<string, Record<string, Tensor>> = {};
  for (const [camera, channels] of Object.entries(heatmaps)) {
    overlays[camera] = {};
    for (const [channel, wire] of Object.entries(channels)) {
      overlays[camera][channel] = decodeTensor(wire);
    }
  }
  view.representationId = representationId;
  view.overlays = overlays;
  view.frameIndex = 0;
  view.eventLog = [];
  view.done = false;
}

export function appendFrames(
  view: SessionView,
  frames: { index: number; events: unknown[][] }[],
  done: boolean,
): void {
  for (const frame of frames) {
    view.frameIndex = frame.index;
    for (const event of frame.events) {
      view.eventLog.push(`[${frame.index}] ${event.join(" ")}`);
    }
  }
  view.done = done;
}
