/** Bootstrap: wire the API client, controller, and renderer together.
 *
 * Configuration: `?api=<base-url>` query parameter (default
 * http://127.0.0.1:8800); the reviewer name is remembered in localStorage.
 */

import { ReviewApiClient } from "./api.js";
import { ReviewController } from "./controller.js";
import { render } from "./view.js";

function reviewerName(): string {
  const stored = localStorage.getItem("stepeval.reviewer");
  if (stored) return stored;
  const name = window.prompt("Reviewer name?")?.trim() || "anonymous";
  localStorage.setItem("stepeval.reviewer", name);
  return name;
}

function main(): void {
  const params = new URLSearchParams(window.location.search);
  const baseUrl = params.get("api") ?? "http://127.0.0.1:8800";
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app mount point");

  const api = new ReviewApiClient(baseUrl, reviewerName());
  const controller = new ReviewController(api, (state) =>
    render(root, state, controller),
  );
  void controller.loadQueue();
}

main();
