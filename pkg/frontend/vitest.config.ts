import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "happy-dom",
    include: ["test/**/*.test.ts"],
    // the suite boots a real policy service (dataset + training + uvicorn)
    hookTimeout: 300_000,
    testTimeout: 120_000,
    fileParallelism: false,
  },
});
