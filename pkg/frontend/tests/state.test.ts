import { describe, expect, it } from "vitest";
import queryFixture from "./fixtures/query_response.json";
import {
  applyHealth,
  clampK,
  initialState,
  parseEhrForm,
  toggleOverlays,
  withBanner,
  withResponse,
} from "../src/state.js";
import { EHR_FIELDS, type QueryResponse } from "../src/types.js";

describe("k handling", () => {
  it("takes bounds from the server health document", () => {
    const state = applyHealth(initialState(), { k_default: 5, k_min: 2, k_max: 12 });
    expect(state.k).toBe(5);
    expect(clampK(state, 1)).toBe(2);
    expect(clampK(state, 99)).toBe(12);
    expect(clampK(state, 7.4)).toBe(7);
  });
});

describe("overlay toggling", () => {
  it("preserves the last response (no re-query needed)", () => {
    let state = withResponse(initialState(), queryFixture as QueryResponse);
    state = toggleOverlays(state);
    expect(state.overlaysOn).toBe(true);
    expect(state.lastResponse).not.toBeNull();
    state = toggleOverlays(state);
    expect(state.overlaysOn).toBe(false);
    expect(state.lastResponse).toBe(queryFixture);
  });
});

describe("banner state", () => {
  it("a successful response clears the banner", () => {
    let state = withBanner(initialState(), "boom");
    expect(state.banner).toBe("boom");
    state = withResponse(state, queryFixture as QueryResponse);
    expect(state.banner).toBe("");
  });
});

describe("ehr form validation", () => {
  const complete = Object.fromEntries(EHR_FIELDS.map((f) => [f.name, String(f.min)]));

  it("accepts a fully valid form as 17 numbers", () => {
    const parsed = parseEhrForm(complete, EHR_FIELDS);
    expect("values" in parsed && parsed.values).toHaveLength(17);
  });

  it("flags missing fields so submit stays disabled", () => {
    const raw = { ...complete, spo2: "" };
    const parsed = parseEhrForm(raw, EHR_FIELDS);
    expect("errors" in parsed && parsed.errors.spo2).toBe("required");
  });

  it("flags non-numeric and out-of-range values per field", () => {
    const raw = { ...complete, age: "abc", rale: "99" };
    const parsed = parseEhrForm(raw, EHR_FIELDS);
    if (!("errors" in parsed)) throw new Error("expected errors");
    expect(parsed.errors.age).toBe("not a number");
    expect(parsed.errors.rale).toContain("outside");
  });
});
