/** Point-specification workbench: view the rendered observation, click
 * pixels per affordance channel, submit, inspect per-channel heatmap tabs,
 * and step the rollout chunk by chunk.
 *
 * One request is in flight per session at a time; controls are disabled
 * while waiting. Reloading and refetching reproduces the identical view —
 * the only client state is the session id and unsent clicks.
 */

import { ServiceClient, Tensor } from "./api.js";
import {
  acceptSpec,
  appendFrames,
  clearSlot,
  initialView,
  recordClick,
  SessionView,
} from "./state.js";
import { drawRgba, DrawnCanvas, entityImageRgba, heatmapRgba } from "./render.js";

export class App {
  client: ServiceClient;
  view: SessionView | null = null;
  root: HTMLElement;

  private observationCanvas: DrawnCanvas;
  private overlayCanvas: DrawnCanvas;
  private affordanceSelect: HTMLSelectElement;
  private channelTabs: HTMLDivElement;
  private instructionBox: HTMLInputElement;
  private statusLine: HTMLDivElement;
  private eventList: HTMLUListElement;
  private buttons: Record<string, HTMLButtonElement> = {};

  constructor(root: HTMLElement, baseUrl: string) {
    this.root = root;
    this.client = new ServiceClient(baseUrl);
    const doc = root.ownerDocument;

    this.observationCanvas = doc.createElement("canvas") as DrawnCanvas;
    this.observationCanvas.id = "observation";
    this.overlayCanvas = doc.createElement("canvas") as DrawnCanvas;
    this.overlayCanvas.id = "overlay";
    this.affordanceSelect = doc.createElement("select");
    this.affordanceSelect.id = "affordance";
    this.channelTabs = doc.createElement("div");
    this.channelTabs.id = "channel-tabs";
    this.instructionBox = doc.createElement("input");
    this.instructionBox.id = "instruction";
    this.statusLine = doc.createElement("div");
    this.statusLine.id = "status";
    this.eventList = doc.createElement("ul");
    this.eventList.id = "events";

    for (const name of ["submit-points", "submit-language", "step", "clear"]) {
      const b = doc.createElement("button");
      b.id = name;
      b.textContent = name;
      this.buttons[name] = b;
    }
    this.buttons["submit-points"].addEventListener("click", () => {
      void this.submitPoints();
    });
    this.buttons["submit-language"].addEventListener("click", () => {
      void this.submitLanguage(this.instructionBox.value);
    });
    this.buttons["step"].addEventListener("click", () => {
      void this.stepRollout();
    });
    this.buttons["clear"].addEventListener("click", () => {
      if (this.view) clearSlot(this.view, this.view.selectedAffordance);
      this.renderStatus();
    });
    this.observationCanvas.addEventListener("click", (e: MouseEvent) => {
      const rect = this.observationCanvas.getBoundingClientRect();
      const scaleX = this.observationCanvas.width / (rect.width || 1);
      const scaleY = this.observationCanvas.height / (rect.height || 1);
      this.clickPixel(
        Math.floor((e.clientX - rect.left) * scaleX),
        Math.floor((e.clientY - rect.top) * scaleY),
      );
    });
    this.affordanceSelect.addEventListener("change", () => {
      if (this.view) this.view.selectedAffordance = this.affordanceSelect.value;
    });

    for (const el of [
      this.statusLine,
      this.observationCanvas,
      this.affordanceSelect,
      this.buttons["clear"],
      this.buttons["submit-points"],
      this.instructionBox,
      this.buttons["submit-language"],
      this.channelTabs,
      this.overlayCanvas,
      this.buttons["step"],
      this.eventList,
    ]) {
      root.appendChild(el);
    }
  }

  private setBusy(busy: boolean): void {
    if (this.view) this.view.busy = busy;
    for (const b of Object.values(this.buttons)) b.disabled = busy;
  }

  private async guarded<T>(work: () => Promise<T>): Promise<T> {
    if (this.view?.busy) throw new Error("request already in flight");
    this.setBusy(true);
    try {
      return await work();
    } finally {
      this.setBusy(false);
    }
  }

  async createSession(template: string, seed: number): Promise<void> {
    const payload = await this.client.createSession(template, seed);
    this.view = initialView(
      payload.session_id,
      template,
      seed,
      payload.observation.instruction,
      payload.affordance_types,
      payload.observation.views,
    );
    this.affordanceSelect.innerHTML = "";
    for (const name of payload.affordance_types) {
      const opt = this.root.ownerDocument.createElement("option");
      opt.value = name;
      opt.textContent = name;
      this.affordanceSelect.appendChild(opt);
    }
    this.channelTabs.innerHTML = "";
    for (const name of payload.affordance_types) {
      const tab = this.root.ownerDocument.createElement("button");
      tab.className = "channel-tab";
      tab.dataset.channel = name;
      tab.textContent = name;
      tab.addEventListener("click", () => this.selectChannel(name));
      this.channelTabs.appendChild(tab);
    }
    this.instructionBox.value = "";
    this.renderObservation();
    this.renderStatus();
  }

  /** Refetch everything displayable for the current session id. */
  async refresh(): Promise<void> {
    const view = this.mustView();
    const obs = await this.client.getObservation(view.sessionId);
    const fresh = initialView(
      view.sessionId,
      view.template,
      view.seed,
      obs.instruction,
      view.affordanceTypes,
      obs.views,
    );
    fresh.pendingClicks = view.pendingClicks;
    fresh.representationId = view.representationId;
    fresh.overlays = view.overlays;
    fresh.selectedChannel = view.selectedChannel;
    this.view = fresh;
    this.renderObservation();
    this.renderOverlay();
    this.renderStatus();
  }

  mustView(): SessionView {
    if (!this.view) throw new Error("no active session");
    return this.view;
  }

  clickPixel(u: number, v: number): void {
    recordClick(this.mustView(), [u, v]);
    this.renderStatus();
  }

  selectChannel(name: string): void {
    this.mustView().selectedChannel = name;
    this.renderOverlay();
  }

  async submitPoints(motionToken?: string): Promise<void> {
    const view = this.mustView();
    await this.guarded(async () => {
      const clicks: Record<string, { camera: string; pixel: [number, number] }> = {};
      for (const [name, click] of Object.entries(view.pendingClicks)) {
        clicks[name] = { camera: click.camera, pixel: click.pixel };
      }
      const res = await this.client.submitPoints(view.sessionId, clicks, motionToken);
      acceptSpec(view, res.representation_id, res.heatmaps);
    });
    this.renderOverlay();
    this.renderStatus();
    this.renderEvents();
  }

  async submitLanguage(text: string): Promise<void> {
    const view = this.mustView();
    await this.guarded(async () => {
      const res = await this.client.submitLanguage(view.sessionId, text);
      acceptSpec(view, res.representation_id, res.heatmaps);
    });
    this.renderOverlay();
    this.renderStatus();
    this.renderEvents();
  }

  async stepRollout(): Promise<void> {
    const view = this.mustView();
    if (view.done) return;
    await this.guarded(async () => {
      const res = await this.client.stepRollout(view.sessionId);
      appendFrames(view, res.frames, res.done);
    });
    this.renderStatus();
    this.renderEvents();
  }

  overlayTensor(camera: string, channel: string): Tensor | null {
    const view = this.mustView();
    return view.overlays?.[camera]?.[channel] ?? null;
  }

  private renderObservation(): void {
    const view = this.mustView();
    const image = view.entityImages[view.selectedCamera];
    const [h, w] = image.shape;
    drawRgba(this.observationCanvas, entityImageRgba(image), h, w);
  }

  private renderOverlay(): void {
    const view = this.mustView();
    const overlay = view.overlays?.[view.selectedCamera]?.[view.selectedChannel];
    if (!overlay) {
      this.overlayCanvas.drawnPixels = undefined;
      return;
    }
    const [h, w] = overlay.shape;
    drawRgba(this.overlayCanvas, heatmapRgba(overlay), h, w);
  }

  private renderStatus(): void {
    const view = this.mustView();
    const clicks = Object.entries(view.pendingClicks)
      .map(([name, c]) => `${name}@(${c.pixel[0]},${c.pixel[1]})`)
      .join(" ");
    this.statusLine.textContent =
      `session ${view.sessionId} | frame ${view.frameIndex}` +
      `${view.done ? " | done" : ""} | rep ${view.representationId ?? "-"}` +
      ` | pending ${clicks || "-"}`;
  }

  private renderEvents(): void {
    const view = this.mustView();
    this.eventList.innerHTML = "";
    for (const line of view.eventLog) {
      const li = this.root.ownerDocument.createElement("li");
      li.textContent = line;
      this.eventList.appendChild(li);
    }
  }
}

export function mountApp(root: HTMLElement, baseUrl: string): App {
  return new App(root, baseUrl);
}
