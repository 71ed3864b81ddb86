/** End-to-end UI test against a live service instance.
 *
 * Boots the real pipeline (tiny dataset + checkpoint via
 * scripts/make_demo_checkpoint.py, then the HTTP service), mounts the app in
 * a DOM, and drives the full session flow: create session, click grasp and
 * place points, verify the heatmap overlays match the server-side
 * render-heatmap output pixel for pixel, then step the rollout to completion
 * with the event log displayed.
 */

import { execFileSync, spawn, ChildProcess } from "node:child_process";
import { existsSync, readFileSync } from "node:fs";
import { mkdtempSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { decodeTensor } from "../src/api.js";
import { App, mountApp } from "../src/app.js";
import { DrawnCanvas } from "../src/render.js";

const REPO = resolve(__dirname, "../..");
const PORT = 8931;
const BASE = `http://127.0.0.1:${PORT}`;
const TEMPLATE = "pick_place";
const SEED = 1007;

let server: ChildProcess;
let artifactDir: string;

async function waitForServer(): Promise<void> {
  for (let i = 0; i < 120; i++) {
    try {
      const res = await fetch(`${BASE}/session/none/report`);
      if (res.status === 404) return;
    } catch {
      /* not up yet */
    }
    await new Promise((r) => setTimeout(r, 500));
  }
  throw new Error("service did not come up");
}

beforeAll(async () => {
  artifactDir = process.env.UI_TEST_ARTIFACTS ?? mkdtempSync(join(tmpdir(), "ui-"));
  if (!existsSync(join(artifactDir, "policy.ckpt"))) {
    execFileSync(
      "python3",
      [join(REPO, "scripts/make_demo_checkpoint.py"), artifactDir],
      { stdio: "inherit" },
    );
  }
  server = spawn(
    "python3",
    [
      "-m",
      "affordkit.cli",
      "serve",
      "--config",
      join(artifactDir, "config.json"),
      "--checkpoint",
      join(artifactDir, "policy.ckpt"),
      "--out",
      join(artifactDir, "serve-out"),
      "--port",
      String(PORT),
    ],
    { cwd: REPO, stdio: "inherit" },
  );
  await waitForServer();
});

afterAll(() => {
  server?.kill();
});

function freshApp(): App {
  const root = document.createElement("div");
  document.body.appendChild(root);
  return mountApp(root, BASE);
}

function pixelOnEntity(app: App, entityId: number): [number, number] {
  const view = app.mustView();
  const image = view.entityImages[view.selectedCamera];
  const [h, w] = image.shape;
  for (let i = 0; i < h * w; i++) {
    if (Number(image.data[i]) === entityId) {
      return [i % w, Math.floor(i / w)]; // (u, v)
    }
  }
  throw new Error(`entity ${entityId} not visible`);
}

describe("session flow", () => {
  it("creates a session, grounds clicks, matches server renders, and steps a rollout", async () => {
    const app = freshApp();
    await app.createSession(TEMPLATE, SEED);
    const view = app.mustView();
    expect(view.sessionId).toBeTruthy();
    expect(view.affordanceTypes).toContain("grasp");
    expect(view.entityImages["topdown"].shape).toEqual([48, 48]);

    // click a grasp point on the target cup and a place point on the basket
    view.selectedAffordance = "grasp";
    app.clickPixel(...pixelOnEntity(app, 1));
    view.selectedAffordance = "place";
    app.clickPixel(...pixelOnEntity(app, 3));
    expect(Object.keys(view.pendingClicks).sort()).toEqual(["grasp", "place"]);
    expect(view.overlays).toBeNull(); // nothing acknowledged yet

    await app.submitPoints();
    expect(view.representationId).toBeTruthy();
    const grasp = app.overlayTensor("topdown", "grasp")!;
    expect(grasp.shape).toEqual([48, 48]);

    // overlay highlights the clicked entity: the brightest pixel lies on it
    const entity = view.entityImages["topdown"];
    let best = 0;
    for (let i = 1; i < 48 * 48; i++) {
      if (Number(grasp.data[i]) > Number(grasp.data[best])) best = i;
    }
    expect(Number(entity.data[best])).toBe(1);

    // language submission runs the identical overlay pipeline, and the
    // overlays match the server-side render-heatmap files pixel for pixel
    await app.submitLanguage(view.instruction);
    execFileSync(
      "python3",
      [
        "-m",
        "affordkit.cli",
        "render-heatmap",
        "--config",
        join(artifactDir, "config.json"),
        "--template",
        TEMPLATE,
        "--seed",
        String(SEED),
        "--out",
        join(artifactDir, "render"),
      ],
      { cwd: REPO, stdio: "inherit" },
    );
    for (const camera of ["topdown", "front"]) {
      for (const channel of view.affordanceTypes) {
        const overlay = app.overlayTensor(camera, channel)!;
        const raw = readFileSync(
          join(artifactDir, "render", `${camera}_${channel}.u8`),
        );
        expect(overlay.data.length).toBe(raw.length);
        expect(Buffer.from(overlay.data as Uint8Array).equals(raw)).toBe(true);
      }
    }

    // the overlay canvas shows exactly the fetched bytes (grayscale RGBA)
    app.selectChannel("grasp");
    const canvas = document.getElementById("overlay") as DrawnCanvas;
    const drawn = canvas.drawnPixels!;
    const shown = app.overlayTensor("topdown", "grasp")!;
    for (let i = 0; i < 48 * 48; i++) {
      expect(drawn[4 * i]).toBe(Number(shown.data[i]));
    }

    // step the rollout to completion; the event log fills in
    let rounds = 0;
    while (!app.mustView().done && rounds < 20) {
      await app.stepRollout();
      rounds++;
    }
    expect(app.mustView().done).toBe(true);
    expect(app.mustView().frameIndex).toBeGreaterThan(0);

    const report = await app.client.getReport(view.sessionId);
    expect(report.done).toBe(true);
    expect(typeof report.success).toBe("boolean");
    expect(report.steps_taken).toBe(app.mustView().frameIndex);
  });

  it("reload: refetching reproduces the identical view", async () => {
    const app = freshApp();
    await app.createSession(TEMPLATE, 3);
    const before = app.mustView().entityImages["topdown"].data.slice();
    await app.refresh();
    const after = app.mustView().entityImages["topdown"].data;
    expect(Array.from(after as Int32Array)).toEqual(
      Array.from(before as Int32Array),
    );
  });

  it("clearing a pending slot removes it before submission", async () => {
    const app = freshApp();
    await app.createSession(TEMPLATE, 5);
    const view = app.mustView();
    view.selectedAffordance = "grasp";
    app.clickPixel(...pixelOnEntity(app, 1));
    expect(view.pendingClicks["grasp"]).toBeTruthy();
    (document.querySelectorAll("#clear")[
      document.querySelectorAll("#clear").length - 1
    ] as HTMLButtonElement).click();
    expect(view.pendingClicks["grasp"]).toBeUndefined();
  });

  it("surfaces machine-readable errors from the service", async () => {
    const app = freshApp();
    await app.createSession(TEMPLATE, 6);
    await expect(app.submitLanguage("transmogrify the gazebo")).rejects.toMatchObject({
      status: 400,
      code: "bad_instruction",
    });
  });
});
