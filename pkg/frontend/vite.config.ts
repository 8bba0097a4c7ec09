import { defineConfig } from "vite";

// In dev, /api/v1 is proxied to a local instance so the SPA stays
// same-origin with the service it talks to.
export default defineConfig({
  server: {
    proxy: {
      "/api": {
        target: process.env.TWIN_ENDPOINT ?? "http://127.0.0.1:8080",
        changeOrigin: true,
      },
    },
  },
});
