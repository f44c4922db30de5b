import { describe, expect, it } from "vitest";

import { ApiError, ReviewApiClient } from "../src/api.js";
import { FakeReviewServer } from "./fake_api.js";

function makeClient(server: FakeReviewServer, reviewer = "alice") {
  return new ReviewApiClient("http://fake", reviewer, server.fetch);
}

describe("ReviewApiClient", () => {
  it("fetches the queue with state and limit", async () => {
    const server = new FakeReviewServer();
    server.addSample("r-1", ["a", "b", "c"]);
    server.addSample("r-2", ["a", "b", "c"]);
    const rows = await makeClient(server).queue("InReview", 1);
    expect(rows).toHaveLength(1);
    expect(rows[0].id).toBe("r-1");
    expect(rows[0].chain?.steps).toEqual(["a", "b", "c"]);
  });

  it("sends the reviewer on lease calls", async () => {
    const server = new FakeReviewServer();
    server.addSample("r-1", ["a", "b", "c"]);
    const lease = await makeClient(server, "carol").lease("r-1");
    expect(lease.reviewer).toBe("carol");
    expect(server.calls.at(-1)?.body).toEqual({ reviewer: "carol" });
  });

  it("sends the X-Reviewer header on events", async () => {
    const server = new FakeReviewServer();
    server.addSample("r-1", ["a", "b", "c"]);
    const client = makeClient(server, "carol");
    await client.lease("r-1");
    await client.postEvent("r-1", "EditedStep", { index: 1, text: "better" });
    expect(server.calls.at(-1)?.reviewer).toBe("carol");
  });

  it("maps 423 to an ApiError with status", async () => {
    const server = new FakeReviewServer();
    server.addSample("r-1", ["a", "b", "c"]);
    server.leases.set("r-1", "someone-else");
    const error = await makeClient(server)
      .lease("r-1")
      .catch((e) => e);
    expect(error).toBeInstanceOf(ApiError);
    expect((error as ApiError).status).toBe(423);
  });

  it("surfaces the 409 reason code", async () => {
    const server = new FakeReviewServer();
    server.addSample("r-1", ["a", "b"]);
    const client = makeClient(server);
    await client.lease("r-1");
    const error = await client
      .postEvent("r-1", "Accepted")
      .catch((e) => e);
    expect(error).toBeInstanceOf(ApiError);
    expect((error as ApiError).status).toBe(409);
    expect((error as ApiError).reason).toBe("min-steps");
    expect((error as ApiError).message).toContain("at least 3 steps");
  });

  it("returns the updated summary after an event", async () => {
    const server = new FakeReviewServer();
    server.addSample("r-1", ["a", "b", "c"]);
    const client = makeClient(server);
    await client.lease("r-1");
    const summary = await client.postEvent("r-1", "EditedStep", {
      index: 2,
      text: "b, clarified",
    });
    expect(summary.chain?.steps[1]).toBe("b, clarified");
  });
});
