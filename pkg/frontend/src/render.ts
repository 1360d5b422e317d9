import type { ClinicalInfo, QueryResponse, ResultEntry } from "./types.js";

// Pure HTML-string renderers so view logic is testable without a browser.

const LABEL_CLASSES: Record<string, string> = {
  control: "badge-control",
  pneumonia: "badge-pneumonia",
  covid19: "badge-covid",
};

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/** Absent clinical values render as an em-dash placeholder, never blank. */
export function clinicalCell(value: number | boolean | string | undefined | null, digits = 1): string {
  if (value === undefined || value === null) return "—";
  if (typeof value === "boolean") return value ? "yes" : "no";
  if (typeof value === "number") {
    return Number.isInteger(value) ? String(value) : value.toFixed(digits);
  }
  return escapeHtml(String(value));
}

export function clinicalTable(c: ClinicalInfo): string {
  const rows: Array<[string, string]> = [
    ["Age", clinicalCell(c.age, 0)],
    ["Sex", clinicalCell(c.sex)],
    ["RALE", clinicalCell(c.rale)],
    ["SpO2", clinicalCell(c.spo2)],
    ["WBC", clinicalCell(c.wbc)],
    ["ICU", clinicalCell(c.icu)],
  ];
  const body = rows
    .map(([name, value]) => `<tr><th>${name}</th><td>${value}</td></tr>`)
    .join("");
  return `<table class="clinical">${body}</table>`;
}

export function labelBadge(label: string): string {
  const cls = LABEL_CLASSES[label] ?? "badge-unknown";
  return `<span class="badge ${cls}">${escapeHtml(label)}</span>`;
}

export function resultCard(entry: ResultEntry, overlaysOn: boolean): string {
  const src = overlaysOn ? entry.overlay_url : entry.thumbnail_url;
  return [
    `<div class="card" data-id="${escapeHtml(entry.id)}">`,
    `<img src="${escapeHtml(src)}" alt="case ${escapeHtml(entry.id)}"`,
    ` data-plain="${escapeHtml(entry.thumbnail_url)}" data-overlay="${escapeHtml(entry.overlay_url)}">`,
    `<div class="card-head">${labelBadge(entry.label)}`,
    `<span class="sim">S=${entry.similarity.toFixed(4)}</span></div>`,
    clinicalTable(entry.clinical),
    `</div>`,
  ].join("");
}

export function scoreBar(scores: Record<string, number>, predicted: string): string {
  const total = Object.values(scores).reduce((a, b) => a + b, 0) || 1;
  const parts = Object.entries(scores)
    .map(([label, score]) => {
      const pct = ((100 * score) / total).toFixed(1);
      const cls = LABEL_CLASSES[label] ?? "badge-unknown";
      return `<div class="score-seg ${cls}" style="width:${pct}%" title="${escapeHtml(label)}: ${score.toFixed(3)}"></div>`;
    })
    .join("");
  return [
    `<div class="prediction">Predicted: ${labelBadge(predicted)}</div>`,
    `<div class="score-bar">${parts}</div>`,
  ].join("");
}

export function resultsGrid(resp: QueryResponse, overlaysOn: boolean): string {
  const cards = resp.results.map((entry) => resultCard(entry, overlaysOn)).join("");
  return [
    scoreBar(resp.class_scores, resp.predicted_label),
    `<div class="timing">${resp.results.length} results in ${resp.timing_ms.toFixed(0)} ms</div>`,
    `<div class="grid">${cards}</div>`,
  ].join("");
}

export function banner(message: string): string {
  return message ? `<div class="banner">${escapeHtml(message)}</div>` : "";
}

export function probabilityGauge(p: number | null): string {
  if (p === null) return `<div class="gauge empty">no prediction yet</div>`;
  const pct = (100 * p).toFixed(1);
  return [
    `<div class="gauge"><div class="gauge-fill" style="width:${pct}%"></div>`,
    `<span class="gauge-value">${p.toFixed(3)}</span></div>`,
  ].join("");
}
