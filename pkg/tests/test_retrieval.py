import json

import numpy as np
import pytest

from cxrsearch.core import ALL_LABELS, ClassLabel
from cxrsearch.errors import (
    DuplicateId,
    EmptyIndex,
    EmptyResult,
    HashMismatch,
    IdOverlap,
    NotNormalized,
    SchemaError,
)
from cxrsearch.retrieval import (
    QueryPoint,
    RetrievalEntry,
    RetrievalResult,
    build_index,
    eval_diagnosis,
    eval_recall_at_k,
    knn_classify,
    load_index,
    query_topk,
    random_baseline_recall,
    save_index,
)

C, P, V = ClassLabel.Control, ClassLabel.NonCovidPneumonia, ClassLabel.Covid19


def unit_rows(n, d, rng):
    e = rng.normal(size=(n, d))
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def random_index(n, d, rng, prefix="g"):
    labels = [ALL_LABELS[int(rng.integers(3))] for _ in range(n)]
    return build_index(
        unit_rows(n, d, rng), [f"{prefix}{i}" for i in range(n)], labels
    )


# ------------------------------------------------------------------ build

def test_build_index_valid():
    rng = np.random.default_rng(0)
    idx = random_index(100, 8, rng)
    assert len(idx) == 100 and idx.dim == 8


def test_build_index_rejects_bad_norm():
    rows = np.array([[1.0, 0.0], [0.25, 0.25]])
    with pytest.raises(NotNormalized):
        build_index(rows, ["a", "b"], [C, P])


def test_build_index_rejects_duplicate_id():
    rows = np.eye(2)
    with pytest.raises(DuplicateId):
        build_index(rows, ["a", "a"], [C, P])


# ------------------------------------------------------------------ query

def test_query_exact_match_first():
    rng = np.random.default_rng(1)
    idx = random_index(50, 8, rng)
    res = query_topk(idx, idx.matrix[17], 3)
    assert res.entries[0].id == "g17"
    assert res.entries[0].similarity == pytest.approx(1.0, abs=1e-9)


def test_query_hand_similarities():
    rows = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]])
    idx = build_index(rows, ["a", "b", "c"], [C, P, V])
    res = query_topk(idx, np.array([1.0, 0.0]), 2)
    assert [e.id for e in res] == ["a", "b"]
    assert [e.similarity for e in res] == pytest.approx([1.0, 0.6])


def test_query_k_larger_than_gallery():
    rng = np.random.default_rng(2)
    idx = random_index(5, 4, rng)
    res = query_topk(idx, unit_rows(1, 4, rng)[0], 50)
    assert len(res) == 5
    sims = [e.similarity for e in res]
    assert sims == sorted(sims, reverse=True)


def test_query_tie_broken_by_id():
    rows = np.array([[1.0, 0.0], [1.0, 0.0]])
    idx = build_index(rows, ["zz", "aa"], [C, P])
    res = query_topk(idx, np.array([1.0, 0.0]), 2)
    assert [e.id for e in res] == ["aa", "zz"]


def test_query_empty_index():
    idx = build_index(np.zeros((0, 4)), [], [])
    with pytest.raises(EmptyIndex):
        query_topk(idx, np.array([1.0, 0, 0, 0]), 1)


def test_query_matches_brute_force():
    rng = np.random.default_rng(3)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        d = int(rng.integers(2, 10))
        idx = random_index(n, d, rng)
        q = unit_rows(1, d, rng)[0]
        k = int(rng.integers(1, n + 1))
        got = [(e.id, e.similarity) for e in query_topk(idx, q, k)]
        sims = idx.matrix @ q
        want = sorted(zip(idx.ids, sims), key=lambda t: (-t[1], t[0]))[:k]
        assert [g[0] for g in got] == [w[0] for w in want]
        np.testing.assert_allclose([g[1] for g in got], [w[1] for w in want])


# ------------------------------------------------------------------- knn

def entry(label, sim, id_="x"):
    return RetrievalEntry(id=id_, label=label, similarity=sim)


def test_knn_hand_example():
    result = RetrievalResult(
        entries=(
            entry(V, 0.95, "a"),
            entry(C, 0.90, "b"),
            entry(C, 0.85, "c"),
        )
    )
    label, scores = knn_classify(result)
    assert label is C
    assert scores[V] == pytest.approx(1 / np.sqrt(2 * 0.05), rel=1e-12)
    assert scores[C] == pytest.approx(
        1 / np.sqrt(2 * 0.10) + 1 / np.sqrt(2 * 0.15), rel=1e-12
    )
    assert scores[V] == pytest.approx(3.1623, abs=1e-4)
    assert scores[C] == pytest.approx(2.2361 + 1.8257, abs=1e-4)


def test_knn_single_neighbor():
    label, _ = knn_classify(RetrievalResult(entries=(entry(P, 0.4),)))
    assert label is P


def test_knn_exact_duplicate_dominates():
    result = RetrievalResult(
        entries=(entry(V, 1.0),) + tuple(entry(C, 0.99, f"c{i}") for i in range(9))
    )
    label, scores = knn_classify(result)
    assert label is V
    assert scores[V] == pytest.approx(1e12)


def test_knn_empty_result():
    with pytest.raises(EmptyResult):
        knn_classify(RetrievalResult(entries=()))


def test_knn_matches_high_precision_oracle():
    from mpmath import mp, mpf, sqrt as mpsqrt

    mp.dps = 50
    rng = np.random.default_rng(4)
    for _ in range(500):
        n = int(rng.integers(1, 12))
        sims = rng.uniform(-1, 1, size=n)
        labels = [ALL_LABELS[int(rng.integers(3))] for _ in range(n)]
        result = RetrievalResult(
            entries=tuple(
                entry(l, float(s), f"e{i}") for i, (l, s) in enumerate(zip(labels, sims))
            )
        )
        got, _ = knn_classify(result)
        scores = {c: mpf(0) for c in ALL_LABELS}
        for l, s in zip(labels, sims):
            d = mpsqrt(max(2 * (1 - mpf(repr(float(s)))), mpf(0)))
            scores[l] += 1 / max(d, mpf("1e-12"))
        want = max(ALL_LABELS, key=lambda c: (scores[c], -c.value))
        assert got is want


# ------------------------------------------------------------- evaluation

def _query_points(vectors, labels, prefix="q"):
    return [
        QueryPoint(id=f"{prefix}{i}", label=l, vector=v)
        for i, (v, l) in enumerate(zip(vectors, labels))
    ]


def test_recall_perfect_and_zero():
    rows = np.eye(3)
    idx = build_index(rows, ["a", "b", "c"], [C, P, V])
    queries = _query_points(rows, [C, P, V])
    assert eval_recall_at_k(idx, queries, 1)["overall"] == 1.0
    flipped = _query_points(rows, [V, C, P])
    assert eval_recall_at_k(idx, flipped, 1)["overall"] == 0.0


def test_recall_monotone_in_k():
    rng = np.random.default_rng(5)
    idx = random_index(40, 6, rng)
    queries = _query_points(
        unit_rows(15, 6, rng), [ALL_LABELS[int(rng.integers(3))] for _ in range(15)]
    )
    values = [eval_recall_at_k(idx, queries, k)["overall"] for k in range(1, 41)]
    assert all(a <= b + 1e-12 for a, b in zip(values, values[1:]))


def test_recall_id_overlap():
    rows = np.eye(3)
    idx = build_index(rows, ["a", "b", "c"], [C, P, V])
    queries = [QueryPoint(id="a", label=C, vector=rows[0])]
    with pytest.raises(IdOverlap):
        eval_recall_at_k(idx, queries, 1)


def test_diagnosis_hand_confusion():
    # gallery of three well-separated directions; queries placed so the
    # predictions become [Ctl, Pna, Pna, Cov] for truths [Ctl, Ctl, Pna, Cov]
    rows = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    idx = build_index(rows, ["gc", "gp", "gv"], [C, P, V])
    queries = [
        QueryPoint(id="q0", label=C, vector=np.array([1.0, 0.0])),
        QueryPoint(id="q1", label=C, vector=np.array([0.0, 1.0])),  # misread as Pna
        QueryPoint(id="q2", label=P, vector=np.array([0.0, 1.0])),
        QueryPoint(id="q3", label=V, vector=np.array([-1.0, 0.0])),
    ]
    rep = eval_diagnosis(idx, queries, k=1)
    assert rep.accuracy == pytest.approx(0.75)
    assert rep.sensitivity[C] == pytest.approx(0.5)
    assert rep.ppv[C] == pytest.approx(1.0)
    assert rep.sensitivity[P] == pytest.approx(1.0)
    assert rep.ppv[P] == pytest.approx(0.5)
    assert rep.confusion.sum() == 4
    assert rep.confusion[C.value].sum() == 2  # row sums = truth counts


def test_diagnosis_perfect():
    rows = np.eye(3)
    idx = build_index(rows, ["a", "b", "c"], [C, P, V])
    rep = eval_diagnosis(idx, _query_points(rows, [C, P, V]), k=1)
    assert rep.accuracy == 1.0
    assert all(v == 1.0 for v in rep.sensitivity.values())
    assert all(v == 1.0 for v in rep.ppv.values())


def test_diagnosis_absent_class_not_applicable():
    rows = np.eye(3)
    idx = build_index(rows, ["a", "b", "c"], [C, P, V])
    queries = _query_points(rows[:2], [C, P])
    rep = eval_diagnosis(idx, queries, k=1)
    assert rep.sensitivity[V] is None


# ---------------------------------------------------------------- baseline

def test_random_baseline_k1_balanced():
    out = random_baseline_recall([1000, 1000, 1000], k=1, trials=200_000, seed=0)
    assert out["overall"] == pytest.approx(1 / 3, abs=0.003)


def test_random_baseline_k4_balanced():
    out = random_baseline_recall([1000, 1000, 1000], k=4, trials=200_000, seed=1)
    assert out["overall"] == pytest.approx(1 - (2 / 3) ** 4, abs=0.003)


def test_random_baseline_requires_many_trials():
    with pytest.raises(ValueError):
        random_baseline_recall([10, 10, 10], k=1, trials=100)


def test_random_baseline_exact_small_gallery():
    # analytic: P(hit) = 1 - C(n - n_c, k) / C(n, k); n=6, n_c=2, k=2 -> 0.6
    out = random_baseline_recall([2, 2, 2], k=2, trials=300_000, seed=2)
    assert out["per_class"]["control"] == pytest.approx(0.6, abs=0.005)


# ------------------------------------------------------------ persistence

def test_index_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    idx = random_index(100, 16, rng)
    idx = build_index(idx.matrix, idx.ids, idx.labels, model_hash="abc123")
    path = save_index(idx, tmp_path / "emb.jsonl")
    back = load_index(path)
    assert back.ids == idx.ids
    assert back.labels == idx.labels
    assert back.model_hash == "abc123"
    assert np.abs(back.matrix - idx.matrix).max() < 1e-6


def test_index_truncated_file(tmp_path):
    rng = np.random.default_rng(7)
    idx = random_index(10, 4, rng)
    path = save_index(idx, tmp_path / "emb.jsonl")
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:5]) + "\n")
    with pytest.raises(SchemaError):
        load_index(path)


def test_index_dim_mismatch(tmp_path):
    rng = np.random.default_rng(8)
    idx = random_index(4, 4, rng)
    path = save_index(idx, tmp_path / "emb.jsonl")
    meta = json.loads((tmp_path / "meta.json").read_text())
    meta["dim"] = 5
    (tmp_path / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(SchemaError):
        load_index(path)


def test_index_hash_mismatch_strict(tmp_path):
    rng = np.random.default_rng(9)
    idx = build_index(unit_rows(3, 4, rng), ["a", "b", "c"], [C, P, V], model_hash="h1")
    path = save_index(idx, tmp_path / "emb.jsonl")
    with pytest.raises(HashMismatch):
        load_index(path, expect_model_hash="h2", strict=True)
    assert load_index(path, expect_model_hash="h2", strict=False) is not None
    assert load_index(path, expect_model_hash="h1", strict=True) is not None
