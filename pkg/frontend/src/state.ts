import type { QueryResponse } from "./types.js";

/** Client-side view state; every displayed number originates server-side. */
export interface UiQueryState {
  k: number;
  kMin: number;
  kMax: number;
  overlaysOn: boolean;
  selectedImage: Blob | null;
  selectedName: string;
  lastResponse: QueryResponse | null;
  banner: string;
}

export function initialState(): UiQueryState {
  return {
    k: 10,
    kMin: 1,
    kMax: 30,
    overlaysOn: false,
    selectedImage: null,
    selectedName: "",
    lastResponse: null,
    banner: "",
  };
}

export function clampK(state: UiQueryState, k: number): number {
  return Math.min(state.kMax, Math.max(state.kMin, Math.round(k)));
}

export function applyHealth(
  state: UiQueryState,
  bounds: { k_default: number; k_min: number; k_max: number },
): UiQueryState {
  return { ...state, k: bounds.k_default, kMin: bounds.k_min, kMax: bounds.k_max };
}

/** Toggling overlays must not clear the last response (no re-query). */
export function toggleOverlays(state: UiQueryState): UiQueryState {
  return { ...state, overlaysOn: !state.overlaysOn };
}

export function withResponse(state: UiQueryState, resp: QueryResponse): UiQueryState {
  return { ...state, lastResponse: resp, banner: "" };
}

export function withBanner(state: UiQueryState, message: string): UiQueryState {
  return { ...state, banner: message };
}

/**
 * Validate the 17 EHR inputs; returns the parsed vector or a map of
 * per-field problems. Blank fields are invalid (submit stays disabled).
 */
export function parseEhrForm(
  raw: Record<string, string>,
  fields: ReadonlyArray<{ name: string; min: number; max: number }>,
): { values: number[] } | { errors: Record<string, string> } {
  const values: number[] = [];
  const errors: Record<string, string> = {};
  for (const field of fields) {
    const text = (raw[field.name] ?? "").trim();
    if (text === "") {
      errors[field.name] = "required";
      continue;
    }
    const value = Number(text);
    if (!Number.isFinite(value)) {
      errors[field.name] = "not a number";
    } else if (value < field.min || value > field.max) {
      errors[field.name] = `outside [${field.min}, ${field.max}]`;
    } else {
      values.push(value);
    }
  }
  return Object.keys(errors).length > 0 ? { errors } : { values };
}
