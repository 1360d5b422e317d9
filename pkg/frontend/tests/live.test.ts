// Round-trip against a real running service. Enabled only when
// CXR_UI_BASE points at one (e.g. http://127.0.0.1:8321); the rest of the
// suite runs fully offline on recorded fixtures.
import { describe, expect, it } from "vitest";
import { ApiClient } from "../src/api.js";
import { resultsGrid } from "../src/render.js";
import { EHR_FIELDS } from "../src/types.js";

const base = process.env.CXR_UI_BASE ?? "";
const liveIt = base ? it : it.skip;

describe("live service round trip", () => {
  liveIt("upload -> k cards -> slider re-query -> predict", async () => {
    const client = new ApiClient(base);
    const health = await client.health();
    expect(health.status).toBe("ok");
    expect(health.k_min).toBeGreaterThanOrEqual(1);

    // grab a gallery image to use as the upload
    const sample = health.sample_ids[0]!;
    const imageResp = await fetch(`${base}/api/images/${sample}`);
    expect(imageResp.ok).toBe(true);
    const blob = await imageResp.blob();

    const k = health.k_default;
    const resp = await client.query(blob, k, "upload.png");
    expect(resp.results.length).toBe(Math.min(k, health.index_size));
    for (const entry of resp.results) {
      expect(["control", "pneumonia", "covid19"]).toContain(entry.label);
      expect(entry.similarity).toBeLessThanOrEqual(1.000001);
      expect(entry.overlay_url).toContain("/api/overlays/");
    }
    // the grid renders one card per result with badges and similarities
    const html = resultsGrid(resp, true);
    expect((html.match(/class="card"/g) ?? []).length).toBe(resp.results.length);
    expect(html).toContain("badge");

    // overlay URLs actually serve PNGs
    const overlay = await fetch(`${base}${resp.results[0]!.overlay_url}`);
    expect(overlay.headers.get("content-type")).toBe("image/png");

    // slider change = exactly one more query
    const before = client.queryCount;
    const smaller = await client.query(blob, Math.max(health.k_min, k - 1), "upload.png");
    expect(client.queryCount).toBe(before + 1);
    expect(smaller.results.length).toBe(Math.max(health.k_min, k - 1));

    // predict panel renders a probability in [0, 1]
    if (health.predict_available) {
      const ehr = EHR_FIELDS.map((f) => (f.min + f.max) / 2);
      const out = await client.predict(sample, ehr);
      expect(out.probability).toBeGreaterThanOrEqual(0);
      expect(out.probability).toBeLessThanOrEqual(1);
    }
  }, 60_000);
});
