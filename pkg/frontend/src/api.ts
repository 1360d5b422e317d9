import type { HealthResponse, PredictResponse, QueryResponse } from "./types.js";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function errorDetail(resp: Response): Promise<string> {
  try {
    const body = await resp.json();
    return typeof body.detail === "string" ? body.detail : resp.statusText;
  } catch {
    return resp.statusText;
  }
}

/**
 * Thin client over the retrieval service. At most one query request is in
 * flight: starting a new one aborts the previous.
 */
export class ApiClient {
  private inflight: AbortController | null = null;
  queryCount = 0;

  constructor(
    private base: string = "",
    private fetchFn: typeof fetch = globalThis.fetch?.bind(globalThis),
  ) {}

  async health(): Promise<HealthResponse> {
    const resp = await this.fetchFn(`${this.base}/api/health`);
    if (!resp.ok) throw new ApiError(resp.status, await errorDetail(resp));
    return resp.json();
  }

  async query(image: Blob, k: number, filename = "query.png"): Promise<QueryResponse> {
    this.inflight?.abort();
    const controller = new AbortController();
    this.inflight = controller;
    this.queryCount += 1;

    const form = new FormData();
    form.append("image", image, filename);
    form.append("k", String(k));
    try {
      const resp = await this.fetchFn(`${this.base}/api/query`, {
        method: "POST",
        body: form,
        signal: controller.signal,
      });
      if (!resp.ok) throw new ApiError(resp.status, await errorDetail(resp));
      return await resp.json();
    } finally {
      if (this.inflight === controller) this.inflight = null;
    }
  }

  async predict(imageRef: string, ehr: number[]): Promise<PredictResponse> {
    const resp = await this.fetchFn(`${this.base}/api/predict-intervention`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ image: imageRef, ehr }),
    });
    if (!resp.ok) throw new ApiError(resp.status, await errorDetail(resp));
    return resp.json();
  }
}
