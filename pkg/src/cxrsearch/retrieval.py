"""Exact top-k cosine retrieval over an immutable embedding gallery,
distance-weighted KNN diagnosis, and the evaluation metrics.

Galleries are small enough that every query is an exhaustive scan; no
approximate structures, so every result is exactly reproducible and easy
to check against brute force.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import ALL_LABELS, ClassLabel, ClinicalRecord
from .errors import (
    DuplicateId,
    EmptyIndex,
    EmptyResult,
    HashMismatch,
    IdOverlap,
    IoError,
    NotNormalized,
    SchemaError,
)

NORM_TOL = 1e-5
MIN_DISTANCE = 1e-12
DEFAULT_KNN_K = 10


@dataclass(frozen=True)
class EmbeddingIndex:
    ids: tuple[str, ...]
    labels: tuple[ClassLabel, ...]
    matrix: np.ndarray  # n x d, unit-norm rows
    model_hash: str = ""
    metric: str = "cosine"

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class RetrievalEntry:
    id: str
    label: ClassLabel
    similarity: float
    clinical: Optional[ClinicalRecord] = None


@dataclass(frozen=True)
class RetrievalResult:
    entries: tuple[RetrievalEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass
class DiagnosisReport:
    accuracy: float
    sensitivity: dict[ClassLabel, Optional[float]]
    ppv: dict[ClassLabel, Optional[float]]
    confusion: np.ndarray  # rows = truth, cols = prediction, label order
    n_queries: int

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n_queries": self.n_queries,
            "sensitivity": {c.json_name: self.sensitivity[c] for c in ALL_LABELS},
            "ppv": {c.json_name: self.ppv[c] for c in ALL_LABELS},
            "confusion": self.confusion.tolist(),
        }


def build_index(
    embeddings: np.ndarray,
    ids: Sequence[str],
    labels: Sequence[ClassLabel],
    model_hash: str = "",
) -> EmbeddingIndex:
    """Assemble an immutable gallery; rejects duplicates and bad norms."""
    matrix = np.asarray(embeddings, dtype=np.float64)
    if matrix.ndim != 2 or len(ids) != matrix.shape[0] or len(labels) != matrix.shape[0]:
        raise ValueError("embeddings, ids and labels must have equal length")
    norms = np.linalg.norm(matrix, axis=1)
    bad = np.nonzero(np.abs(norms - 1.0) > NORM_TOL)[0]
    if len(bad) > 0:
        raise NotNormalized(
            f"row {bad[0]} has norm {norms[bad[0]]:.6f}, expected 1 +- {NORM_TOL}"
        )
    if len(set(ids)) != len(ids):
        seen: set[str] = set()
        for i in ids:
            if i in seen:
                raise DuplicateId(f"duplicate id {i!r} in index")
            seen.add(i)
    return EmbeddingIndex(
        ids=tuple(str(i) for i in ids),
        labels=tuple(labels),
        matrix=matrix,
        model_hash=model_hash,
    )


def query_topk(
    index: EmbeddingIndex,
    query: np.ndarray,
    k: int,
    clinical: Optional[dict[str, ClinicalRecord]] = None,
) -> RetrievalResult:
    """Exact top-k by cosine similarity; ties broken by ascending id."""
    if len(index) == 0:
        raise EmptyIndex("cannot query an empty index")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = np.asarray(query, dtype=np.float64)
    sims = index.matrix @ q
    ids_arr = np.array(index.ids)
    order = np.lexsort((ids_arr, -sims))[: min(k, len(index))]
    entries = tuple(
        RetrievalEntry(
            id=index.ids[i],
            label=index.labels[i],
            similarity=float(sims[i]),
            clinical=(clinical or {}).get(index.ids[i]),
        )
        for i in order
    )
    return RetrievalResult(entries=entries)


def knn_classify(result: RetrievalResult) -> tuple[ClassLabel, dict[ClassLabel, float]]:
    """Distance-weighted vote over a neighbor list.

    Unit-vector similarity S maps to the exact Euclidean distance
    d = sqrt(2 (1 - S)); each neighbor votes 1 / max(d, 1e-12) for its
    label.  Residual exact score ties fall back to the label order.
    """
    if len(result) == 0:
        raise EmptyResult("cannot vote over an empty result")
    scores: dict[ClassLabel, float] = {c: 0.0 for c in ALL_LABELS}
    for entry in result:
        d = float(np.sqrt(max(2.0 * (1.0 - entry.similarity), 0.0)))
        scores[entry.label] += 1.0 / max(d, MIN_DISTANCE)
    best = max(ALL_LABELS, key=lambda c: (scores[c], -c.value))
    return best, scores


@dataclass(frozen=True)
class QueryPoint:
    id: str
    label: ClassLabel
    vector: np.ndarray


def _check_disjoint(index: EmbeddingIndex, queries: Sequence[QueryPoint]) -> None:
    overlap = set(index.ids) & {q.id for q in queries}
    if overlap:
        raise IdOverlap(f"query ids present in gallery: {sorted(overlap)[:3]}")


def eval_recall_at_k(
    index: EmbeddingIndex, queries: Sequence[QueryPoint], k: int
) -> dict:
    """Fraction of queries whose top-k contains at least one same-label item."""
    if not queries:
        raise ValueError("query set is empty")
    _check_disjoint(index, queries)
    hits = {c: 0 for c in ALL_LABELS}
    totals = {c: 0 for c in ALL_LABELS}
    for q in queries:
        result = query_topk(index, q.vector, k)
        totals[q.label] += 1
        if any(e.label == q.label for e in result):
            hits[q.label] += 1
    per_class = {
        c: (hits[c] / totals[c]) if totals[c] else None for c in ALL_LABELS
    }
    overall = sum(hits.values()) / len(queries)
    return {
        "k": k,
        "overall": overall,
        "per_class": {c.json_name: per_class[c] for c in ALL_LABELS},
        "n_queries": len(queries),
    }


def eval_diagnosis(
    index: EmbeddingIndex, queries: Sequence[QueryPoint], k: int = DEFAULT_KNN_K
) -> DiagnosisReport:
    """Predict every query via weighted KNN and tabulate the metrics."""
    if not queries:
        raise ValueError("query set is empty")
    _check_disjoint(index, queries)
    n = len(ALL_LABELS)
    confusion = np.zeros((n, n), dtype=np.int64)
    for q in queries:
        pred, _ = knn_classify(query_topk(index, q.vector, k))
        confusion[q.label.value, pred.value] += 1

    accuracy = float(np.trace(confusion)) / len(queries)
    sensitivity: dict[ClassLabel, Optional[float]] = {}
    ppv: dict[ClassLabel, Optional[float]] = {}
    for c in ALL_LABELS:
        truth_count = confusion[c.value].sum()
        pred_count = confusion[:, c.value].sum()
        tp = confusion[c.value, c.value]
        sensitivity[c] = float(tp / truth_count) if truth_count else None
        ppv[c] = float(tp / pred_count) if pred_count else None
    return DiagnosisReport(
        accuracy=accuracy,
        sensitivity=sensitivity,
        ppv=ppv,
        confusion=confusion,
        n_queries=len(queries),
    )


def random_baseline_recall(
    class_counts: dict[ClassLabel, int] | Sequence[int],
    k: int,
    trials: int = 100_000,
    seed: int = 0,
    query_weights: Optional[Sequence[float]] = None,
) -> dict:
    """Monte Carlo recall of a label-blind retriever.

    Each trial draws k gallery items without replacement (simulated
    exactly with a multivariate hypergeometric draw over label counts) and
    scores a hit when the query's label appears.  The overall rate
    averages per-class rates under the query-label distribution (defaults
    to the gallery distribution).
    """
    if trials < 100_000:
        raise ValueError("trials must be >= 1e5 for a stable estimate")
    if isinstance(class_counts, dict):
        counts = np.array([class_counts.get(c, 0) for c in ALL_LABELS], dtype=np.int64)
    else:
        counts = np.asarray(class_counts, dtype=np.int64)
    total = int(counts.sum())
    if k < 1 or k > total:
        raise ValueError(f"k {k} outside [1, {total}]")
    rng = np.random.default_rng(seed)
    draws = rng.multivariate_hypergeometric(counts, k, size=trials)
    per_class = (draws >= 1).mean(axis=0)

    present = counts > 0
    if query_weights is None:
        weights = counts / total
    else:
        weights = np.asarray(query_weights, dtype=np.float64)
        weights = weights / weights.sum()
    overall = float(np.sum(per_class[present] * weights[present]))
    return {
        "k": k,
        "trials": trials,
        "overall": overall,
        "per_class": {
            c.json_name: (float(per_class[i]) if present[i] else None)
            for i, c in enumerate(ALL_LABELS)
        },
    }


def save_index(index: EmbeddingIndex, path: str | Path) -> Path:
    """Write rows as JSON lines plus a sidecar meta file.

    `path` is the .jsonl file; meta.json lands next to it.
    """
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for i in range(len(index)):
                row = {
                    "id": index.ids[i],
                    "label": index.labels[i].json_name,
                    "vector": [float(v) for v in index.matrix[i].astype(np.float32)],
                }
                fh.write(json.dumps(row) + "\n")
        meta = {
            "dim": index.dim,
            "metric": index.metric,
            "model_hash": index.model_hash,
            "count": len(index),
        }
        (path.parent / "meta.json").write_text(json.dumps(meta, indent=2))
    except OSError as exc:
        raise IoError(f"cannot write index {path}: {exc}") from None
    return path


def load_index(
    path: str | Path, expect_model_hash: Optional[str] = None, strict: bool = True
) -> EmbeddingIndex:
    """Read an index store; verifies schema, dimensions and count.

    When strict and expect_model_hash is given, a disagreement with the
    recorded hash raises HashMismatch.
    """
    path = Path(path)
    meta_path = path.parent / "meta.json"
    if not path.exists() or not meta_path.exists():
        raise SchemaError(f"index store {path} or its meta.json is missing")
    try:
        meta = json.loads(meta_path.read_text())
        dim, count = int(meta["dim"]), int(meta["count"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"bad index meta: {exc}") from None

    ids: list[str] = []
    labels: list[ClassLabel] = []
    rows: list[np.ndarray] = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                vector = np.asarray(row["vector"], dtype=np.float64)
                ids.append(str(row["id"]))
                labels.append(ClassLabel.from_json(row["label"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise SchemaError(f"bad row at line {line_no}: {exc}") from None
            if vector.shape != (dim,):
                raise SchemaError(
                    f"row {line_no} has dim {vector.shape}, meta says {dim}"
                )
            rows.append(vector)
    if len(rows) != count:
        raise SchemaError(f"index has {len(rows)} rows, meta says {count}")
    if expect_model_hash is not None and strict and meta.get("model_hash") != expect_model_hash:
        raise HashMismatch(
            f"index model hash {str(meta.get('model_hash'))[:12]} != expected "
            f"{expect_model_hash[:12]}"
        )
    matrix = np.stack(rows) if rows else np.zeros((0, dim))
    return build_index(matrix, ids, labels, model_hash=str(meta.get("model_hash", "")))
