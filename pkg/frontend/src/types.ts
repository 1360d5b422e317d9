// Shapes mirror the server's JSON API; the client never computes its own
// similarity or probability values.

export interface ClinicalInfo {
  age?: number;
  sex?: string;
  rale?: number;
  spo2?: number;
  wbc?: number;
  icu?: boolean;
}

export interface ResultEntry {
  id: string;
  label: string;
  similarity: number;
  clinical: ClinicalInfo;
  thumbnail_url: string;
  overlay_url: string;
}

export interface QueryResponse {
  predicted_label: string;
  class_scores: Record<string, number>;
  results: ResultEntry[];
  query_overlay_url: string;
  timing_ms: number;
}

export interface HealthResponse {
  status: string;
  index_size: number;
  model_hash: string;
  k_default: number;
  k_min: number;
  k_max: number;
  predict_available: boolean;
  sample_ids: string[];
}

export interface PredictResponse {
  probability: number;
}

export const EHR_FIELDS: ReadonlyArray<{ name: string; label: string; min: number; max: number }> = [
  { name: "age", label: "Age (years)", min: 0, max: 120 },
  { name: "sex_male", label: "Sex male (0/1)", min: 0, max: 1 },
  { name: "rale", label: "RALE score", min: 0, max: 48 },
  { name: "spo2", label: "SpO2 (%)", min: 0, max: 100 },
  { name: "wbc", label: "WBC (10^3/uL)", min: 0, max: 100 },
  { name: "temperature", label: "Temperature (C)", min: 30, max: 45 },
  { name: "heart_rate", label: "Heart rate (bpm)", min: 0, max: 300 },
  { name: "resp_rate", label: "Resp. rate (/min)", min: 0, max: 80 },
  { name: "systolic_bp", label: "Systolic BP", min: 0, max: 300 },
  { name: "diastolic_bp", label: "Diastolic BP", min: 0, max: 200 },
  { name: "gfr", label: "GFR", min: 0, max: 200 },
  { name: "creatinine", label: "Creatinine", min: 0, max: 20 },
  { name: "crp", label: "CRP", min: 0, max: 500 },
  { name: "d_dimer", label: "D-dimer", min: 0, max: 50 },
  { name: "ferritin", label: "Ferritin", min: 0, max: 10000 },
  { name: "lymphocytes", label: "Lymphocytes", min: 0, max: 20 },
  { name: "platelets", label: "Platelets", min: 0, max: 1000 },
];
