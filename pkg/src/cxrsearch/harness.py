"""End-to-end pipelines shared by the CLI, ablation harness and tests.

These functions wire manifest -> preprocess -> embed -> index -> evaluate
so that every consumer (CLI commands, HTTP service bootstrap, acceptance
suite) runs the exact same pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .core import DatasetManifest
from .embedder import (
    EmbedderConfig,
    ModelCheckpoint,
    embed_batch,
    init_model,
)
from .errors import CxrSearchError
from .metric import LossConfig, TrainResult, train
from .preprocess import MaskProvider, preprocess_eval
from .retrieval import (
    EmbeddingIndex,
    QueryPoint,
    build_index,
    eval_diagnosis,
    eval_recall_at_k,
)


def load_buffers(
    manifest: DatasetManifest,
    split: Optional[str],
    side: int,
    provider: MaskProvider | None = None,
):
    records = manifest.records(split)
    return records, [preprocess_eval(r.path, side, provider) for r in records]


def embed_split(
    model: ModelCheckpoint,
    manifest: DatasetManifest,
    split: Optional[str],
    provider: MaskProvider | None = None,
    use_attention: bool = True,
) -> tuple[list, np.ndarray]:
    records, buffers = load_buffers(
        manifest, split, model.config.input_side, provider
    )
    return records, embed_batch(model, buffers, use_attention=use_attention)


def build_gallery_index(
    model: ModelCheckpoint,
    manifest: DatasetManifest,
    split: str = "train",
    provider: MaskProvider | None = None,
    use_attention: bool = True,
) -> EmbeddingIndex:
    records, matrix = embed_split(model, manifest, split, provider, use_attention)
    return build_index(
        matrix,
        [r.id for r in records],
        [r.label for r in records],
        model_hash=model.content_hash,
    )


def query_points(
    model: ModelCheckpoint,
    manifest: DatasetManifest,
    split: str = "val",
    provider: MaskProvider | None = None,
    use_attention: bool = True,
) -> list[QueryPoint]:
    records, matrix = embed_split(model, manifest, split, provider, use_attention)
    return [
        QueryPoint(id=r.id, label=r.label, vector=matrix[i])
        for i, r in enumerate(records)
    ]


@dataclass
class BenchmarkResult:
    recall: dict
    diagnosis: object  # DiagnosisReport
    train_result: Optional[TrainResult] = None


def evaluate_model(
    model: ModelCheckpoint,
    manifest: DatasetManifest,
    recall_k: int = 4,
    knn_k: int = 10,
    provider: MaskProvider | None = None,
    use_attention: bool = True,
) -> BenchmarkResult:
    """Gallery from the train split, queries from val, both metric families."""
    index = build_gallery_index(model, manifest, "train", provider, use_attention)
    queries = query_points(model, manifest, "val", provider, use_attention)
    return BenchmarkResult(
        recall=eval_recall_at_k(index, queries, recall_k),
        diagnosis=eval_diagnosis(index, queries, knn_k),
    )


def train_and_evaluate(
    manifest: DatasetManifest,
    embed_cfg: EmbedderConfig,
    loss_cfg: LossConfig,
    loss_kind: str = "ms",
    use_attention: bool = True,
    recall_k: int = 4,
    knn_k: int = 10,
    provider: MaskProvider | None = None,
    log_every: int = 0,
) -> tuple[TrainResult, BenchmarkResult]:
    """Common ablation unit: fresh init, train, evaluate on the val split."""
    model = init_model(embed_cfg)
    result = train(
        model,
        manifest,
        loss_cfg,
        loss_kind=loss_kind,
        use_attention=use_attention,
        provider=provider,
        log_every=log_every,
    )
    bench = evaluate_model(
        result.checkpoint, manifest, recall_k, knn_k, provider, use_attention
    )
    bench.train_result = result
    return result, bench


def ablate(
    param: str,
    values: Sequence,
    manifest: DatasetManifest,
    embed_cfg: EmbedderConfig,
    loss_cfg: LossConfig,
    recall_k: int = 4,
    knn_k: int = 10,
    log_every: int = 0,
) -> list[dict]:
    """Sweep one knob and report accuracy/recall per configuration.

    `attention` and `loss` retrain per value; `k` re-votes on one trained
    model; `embed-dim` retrains with different projection widths.
    """
    rows: list[dict] = []
    if param == "attention":
        for flag in values:
            flag = bool(flag)
            _, bench = train_and_evaluate(
                manifest, embed_cfg, loss_cfg, "ms",
                use_attention=flag, recall_k=recall_k, knn_k=knn_k,
                log_every=log_every,
            )
            rows.append(_row({"attention": flag}, bench))
    elif param == "loss":
        for kind in values:
            if kind not in ("ms", "infonce"):
                raise CxrSearchError(f"unknown loss kind {kind!r}")
            _, bench = train_and_evaluate(
                manifest, embed_cfg, loss_cfg, kind,
                recall_k=recall_k, knn_k=knn_k, log_every=log_every,
            )
            rows.append(_row({"loss": kind}, bench))
    elif param == "k":
        _, bench_any = train_and_evaluate(
            manifest, embed_cfg, loss_cfg, "ms",
            recall_k=recall_k, knn_k=knn_k, log_every=log_every,
        )
        model = bench_any.train_result.checkpoint
        index = build_gallery_index(model, manifest, "train")
        queries = query_points(model, manifest, "val")
        for k in values:
            k = int(k)
            rows.append(
                _row(
                    {"k": k},
                    BenchmarkResult(
                        recall=eval_recall_at_k(index, queries, k),
                        diagnosis=eval_diagnosis(index, queries, k),
                    ),
                )
            )
    elif param == "embed-dim":
        for dim in values:
            cfg = replace(embed_cfg, embed_dim=int(dim))
            _, bench = train_and_evaluate(
                manifest, cfg, loss_cfg, "ms",
                recall_k=recall_k, knn_k=knn_k, log_every=log_every,
            )
            rows.append(_row({"embed_dim": int(dim)}, bench))
    else:
        raise CxrSearchError(f"unknown ablation parameter {param!r}")
    return rows


def _row(setting: dict, bench: BenchmarkResult) -> dict:
    return {
        **setting,
        "accuracy": bench.diagnosis.accuracy,
        "recall_overall": bench.recall["overall"],
        "recall_per_class": bench.recall["per_class"],
        "recall_k": bench.recall["k"],
    }
