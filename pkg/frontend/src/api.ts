/** Thin fetch client for the review API. Pure event emitter: every call maps
 * to exactly one HTTP request and no state is kept here. */

import type {
  CurationStats,
  Lease,
  SampleDetail,
  SampleSummary,
} from "./types.js";

export class ApiError extends Error {
  status: number;
  /** Stable machine code carried by 409 responses (e.g. "min-steps"). */
  reason: string | null;

  constructor(status: number, message: string, reason: string | null = null) {
    super(message);
    this.status = status;
    this.reason = reason;
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function raiseForStatus(response: Response): Promise<void> {
  if (response.ok) return;
  let message = `HTTP ${response.status}`;
  let reason: string | null = null;
  try {
    const body = await response.json();
    const detail = body?.detail;
    if (typeof detail === "string") {
      message = detail;
    } else if (detail && typeof detail === "object") {
      message = String(detail.message ?? message);
      reason = typeof detail.reason === "string" ? detail.reason : null;
    }
  } catch {
    // non-JSON error body; keep the status message
  }
  throw new ApiError(response.status, message, reason);
}

export class ReviewApiClient {
  constructor(
    private readonly baseUrl: string,
    public readonly reviewer: string,
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  private async getJson<T>(path: string): Promise<T> {
    const response = await this.fetchImpl(this.url(path));
    await raiseForStatus(response);
    return (await response.json()) as T;
  }

  private async postJson<T>(path: string, body: unknown): Promise<T> {
    const response = await this.fetchImpl(this.url(path), {
      method: "POST",
      headers: {
        "Content-Type": "application/json",
        "X-Reviewer": this.reviewer,
      },
      body: JSON.stringify(body),
    });
    await raiseForStatus(response);
    return (await response.json()) as T;
  }

  queue(state: "Pending" | "InReview", limit = 50): Promise<SampleSummary[]> {
    return this.getJson(`/queue?state=${state}&limit=${limit}`);
  }

  sample(id: string): Promise<SampleDetail> {
    return this.getJson(`/sample/${encodeURIComponent(id)}`);
  }

  lease(id: string): Promise<Lease> {
    return this.postJson(`/sample/${encodeURIComponent(id)}/lease`, {
      reviewer: this.reviewer,
    });
  }

  postEvent(
    id: string,
    kind: string,
    payload: Record<string, unknown> = {},
  ): Promise<SampleSummary> {
    return this.postJson(`/sample/${encodeURIComponent(id)}/events`, {
      kind,
      payload,
    });
  }

  stats(): Promise<CurationStats> {
    return this.getJson("/stats");
  }
}
