import { ApiClient, ApiError } from "./api.js";
import {
  applyHealth,
  clampK,
  initialState,
  parseEhrForm,
  toggleOverlays,
  withBanner,
  withResponse,
} from "./state.js";
import { banner, probabilityGauge, resultsGrid } from "./render.js";
import { EHR_FIELDS } from "./types.js";

const api = new ApiClient("");
let state = initialState();

const el = (id: string) => document.getElementById(id)!;

function renderResults(): void {
  el("banner").innerHTML = banner(state.banner);
  el("results").innerHTML = state.lastResponse
    ? resultsGrid(state.lastResponse, state.overlaysOn)
    : `<div class="hint">Upload a radiograph to search for similar cases.</div>`;
  el("k-value").textContent = String(state.k);
  const queryOverlay = el("query-overlay") as HTMLImageElement;
  if (state.lastResponse && state.overlaysOn) {
    queryOverlay.src = state.lastResponse.query_overlay_url;
    queryOverlay.style.display = "block";
  } else {
    queryOverlay.style.display = "none";
  }
}

async function runQuery(): Promise<void> {
  if (!state.selectedImage) return;
  try {
    const resp = await api.query(state.selectedImage, state.k, state.selectedName);
    state = withResponse(state, resp);
  } catch (err) {
    if ((err as Error).name === "AbortError") return; // superseded request
    const message =
      err instanceof ApiError && err.status === 409
        ? `Model/index mismatch (${err.message}); rebuild the index.`
        : `Query failed: ${(err as Error).message}`;
    state = withBanner(state, message);
  }
  renderResults();
}

function wireQueryPanel(): void {
  const input = el("file-input") as HTMLInputElement;
  input.addEventListener("change", () => {
    const file = input.files?.[0];
    if (!file) return;
    state.selectedImage = file;
    state.selectedName = file.name;
    el("file-name").textContent = file.name;
    void runQuery();
  });

  const slider = el("k-slider") as HTMLInputElement;
  slider.addEventListener("change", () => {
    state.k = clampK(state, Number(slider.value));
    el("k-value").textContent = String(state.k);
    void runQuery(); // exactly one query per committed slider change
  });
  slider.addEventListener("input", () => {
    el("k-value").textContent = String(clampK(state, Number(slider.value)));
  });

  el("overlay-toggle").addEventListener("change", () => {
    state = toggleOverlays(state); // re-render only, no re-query
    renderResults();
  });
}

function wirePredictPanel(): void {
  const form = el("ehr-form") as HTMLFormElement;
  for (const field of EHR_FIELDS) {
    const row = document.createElement("label");
    row.className = "ehr-row";
    row.innerHTML =
      `<span>${field.label}</span>` +
      `<input name="${field.name}" inputmode="decimal" autocomplete="off">` +
      `<em class="field-error" data-for="${field.name}"></em>`;
    form.appendChild(row);
  }
  const submit = el("predict-btn") as HTMLButtonElement;

  const readForm = () => {
    const raw: Record<string, string> = {};
    for (const field of EHR_FIELDS) {
      raw[field.name] = (form.elements.namedItem(field.name) as HTMLInputElement).value;
    }
    return parseEhrForm(raw, EHR_FIELDS);
  };

  const refreshValidity = () => {
    const parsed = readForm();
    for (const field of EHR_FIELDS) {
      const slot = form.querySelector(`[data-for="${field.name}"]`) as HTMLElement;
      slot.textContent = "errors" in parsed ? (parsed.errors[field.name] ?? "") : "";
    }
    submit.disabled = "errors" in parsed || !state.selectedImage;
    el("predict-hint").textContent = submit.disabled
      ? "Fill all 17 fields and select an image first."
      : "";
  };
  form.addEventListener("input", refreshValidity);
  refreshValidity();

  submit.addEventListener("click", async (ev) => {
    ev.preventDefault();
    const parsed = readForm();
    if ("errors" in parsed || !state.selectedImage) return;
    try {
      const myId = state.lastResponse?.query_overlay_url.split("/").pop() ?? "";
      const resp = await api.predict(myId, parsed.values);
      el("gauge-slot").innerHTML = probabilityGauge(resp.probability);
    } catch (err) {
      const message =
        err instanceof ApiError && err.status === 409
          ? `Server reports a model mismatch (${err.message}); rebuild the index/artifact.`
          : `Prediction failed: ${(err as Error).message}`;
      state = withBanner(state, message);
      renderResults();
    }
  });
}

async function boot(): Promise<void> {
  wireQueryPanel();
  wirePredictPanel();
  renderResults();
  el("gauge-slot").innerHTML = probabilityGauge(null);
  try {
    const health = await api.health();
    state = applyHealth(state, health);
    const slider = el("k-slider") as HTMLInputElement;
    slider.min = String(health.k_min);
    slider.max = String(health.k_max);
    slider.value = String(health.k_default);
    el("k-value").textContent = String(health.k_default);
    el("health").textContent =
      `index: ${health.index_size} cases | model ${health.model_hash.slice(0, 10)} | ${health.status}`;
  } catch (err) {
    state = withBanner(state, `Server unreachable: ${(err as Error).message}`);
    renderResults();
  }
}

void boot();
