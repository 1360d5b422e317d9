import numpy as np
import pytest

from cxrsearch import core, embedder, harness, metric, synthdata

TINY = embedder.EmbedderConfig(
    input_side=64, stage2_grid=4, feature_dim=32, proj_hidden=24, seed=0
)
FAST = metric.LossConfig(iterations=2, lr=1e-3, samples_per_class=4, seed=1)


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("harness")
    cfg = synthdata.SynthConfig(per_class_counts=(10, 10, 10), side=64, seed=8)
    _, records = synthdata.generate_dataset(cfg)
    path = synthdata.export(records, out)
    return core.split_stratified(core.load_manifest(path), 0.2, seed=8)


def test_evaluate_model_shapes(tiny_manifest):
    model = embedder.init_model(TINY)
    bench = harness.evaluate_model(model, tiny_manifest, recall_k=2, knn_k=3)
    assert 0.0 <= bench.recall["overall"] <= 1.0
    assert bench.recall["k"] == 2
    assert bench.diagnosis.confusion.sum() == len(tiny_manifest.records("val"))


def test_gallery_queries_disjoint(tiny_manifest):
    model = embedder.init_model(TINY)
    index = harness.build_gallery_index(model, tiny_manifest, "train")
    queries = harness.query_points(model, tiny_manifest, "val")
    assert set(index.ids).isdisjoint({q.id for q in queries})
    assert len(index) == len(tiny_manifest.records("train"))


def test_ablate_loss_sweep(tiny_manifest):
    rows = harness.ablate(
        "loss", ["ms", "infonce"], tiny_manifest, TINY, FAST, recall_k=2, knn_k=3
    )
    assert [r["loss"] for r in rows] == ["ms", "infonce"]
    assert all(0.0 <= r["accuracy"] <= 1.0 for r in rows)


def test_ablate_rejects_unknown_param(tiny_manifest):
    with pytest.raises(Exception):
        harness.ablate("nonsense", [1], tiny_manifest, TINY, FAST)


def test_train_and_evaluate_attention_flag(tiny_manifest):
    result, bench = harness.train_and_evaluate(
        tiny_manifest, TINY, FAST, "ms", use_attention=False, recall_k=2, knn_k=3
    )
    assert len(result.trace) == FAST.iterations
    assert bench.train_result is result
