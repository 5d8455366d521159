import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    environment: "node",
    // the round-trip suite spawns the Python annotation service
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
