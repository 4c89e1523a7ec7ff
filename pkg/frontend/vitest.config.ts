import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    // The live test boots the Python session service, which builds its
    // tag map up front; allow for that.
    testTimeout: 120_000,
    hookTimeout: 120_000,
  },
});
