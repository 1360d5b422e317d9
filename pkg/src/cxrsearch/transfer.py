"""Image-feature transfer for intervention prediction.

Pre-projection pooled features from a frozen embedder are fused with 17
tabular EHR features and fed to a binary classifier, evaluated with
stratified k-fold cross-validated ROC/AUC.  All per-column statistics
(standardization means/SDs, imputation medians) are computed on the
training fold only and applied unchanged to the held-out fold.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from scipy.stats import rankdata

from .core import DatasetManifest
from .embedder import ModelCheckpoint, feature_batch
from .errors import (
    InsufficientSamples,
    IoError,
    NonFinite,
    SchemaError,
    SingleClass,
    SingularFit,
)
from .preprocess import MaskProvider, preprocess_eval
from .synthdata import SynthRecord

# Synthetic cohort schema: 5 informative columns from the clinical record,
# 12 weakly-informative vitals/labs noise columns, 17 in total.
EHR_SCHEMA = (
    "age",
    "sex_male",
    "rale",
    "spo2",
    "wbc",
    "temperature",
    "heart_rate",
    "resp_rate",
    "systolic_bp",
    "diastolic_bp",
    "gfr",
    "creatinine",
    "crp",
    "d_dimer",
    "ferritin",
    "lymphocytes",
    "platelets",
)


@dataclass
class CohortRow:
    image_id: str
    ehr: list[Optional[float]]  # length == len(EHR_SCHEMA); None = missing
    target: bool


class BinaryClassifier(Protocol):
    def fit(self, X: np.ndarray, y: np.ndarray) -> "BinaryClassifier": ...

    def score(self, X: np.ndarray) -> np.ndarray: ...


def extract_feature_matrix(
    model: ModelCheckpoint,
    manifest: DatasetManifest,
    image_ids: Sequence[str],
    provider: MaskProvider | None = None,
) -> np.ndarray:
    """Rows of pre-projection features for the given image ids, eval mode."""
    by_id = {r.id: r for r in manifest.images}
    missing = [i for i in image_ids if i not in by_id]
    if missing:
        raise KeyError(f"image ids not in manifest: {missing[:3]}")
    buffers = [
        preprocess_eval(by_id[i].path, model.config.input_side, provider)
        for i in image_ids
    ]
    return feature_batch(model, buffers)


class Standardizer:
    """Per-column impute (median) + standardize, fit on training data only.

    Missing entries (NaN) are replaced by the training-fold median and a
    paired 0/1 missingness indicator column is appended for each column
    that had any missing training value.  Zero-variance columns are
    dropped with a warning.
    """

    def __init__(self):
        self.medians: np.ndarray | None = None
        self.means: np.ndarray | None = None
        self.stds: np.ndarray | None = None
        self.keep: np.ndarray | None = None
        self.indicator_cols: np.ndarray | None = None

    def fit(self, X: np.ndarray) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        nan_mask = np.isnan(X)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns
            self.medians = np.nanmedian(X, axis=0)
        self.medians = np.where(np.isfinite(self.medians), self.medians, 0.0)
        self.indicator_cols = np.nonzero(nan_mask.any(axis=0))[0]
        filled = np.where(nan_mask, self.medians, X)
        self.means = filled.mean(axis=0)
        self.stds = filled.std(axis=0)
        self.keep = self.stds > 1e-12
        if not self.keep.all():
            warnings.warn(
                f"dropping {int((~self.keep).sum())} constant feature column(s)",
                stacklevel=2,
            )
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        if self.means is None:
            raise RuntimeError("Standardizer used before fit")
        X = np.asarray(X, dtype=np.float64)
        nan_mask = np.isnan(X)
        filled = np.where(nan_mask, self.medians, X)
        if not np.all(np.isfinite(filled)):
            raise NonFinite("non-finite feature values after imputation")
        z = (filled[:, self.keep] - self.means[self.keep]) / self.stds[self.keep]
        if len(self.indicator_cols) > 0:
            z = np.hstack([z, nan_mask[:, self.indicator_cols].astype(np.float64)])
        return z


def fuse(image_features: np.ndarray, ehr: np.ndarray) -> np.ndarray:
    """Concatenate image-feature rows with EHR rows (standardize separately
    via Standardizer inside the CV loop)."""
    image_features = np.atleast_2d(np.asarray(image_features, dtype=np.float64))
    ehr = np.atleast_2d(np.asarray(ehr, dtype=np.float64))
    if image_features.shape[0] != ehr.shape[0]:
        raise ValueError("row counts differ between image and EHR features")
    if not np.all(np.isfinite(image_features)):
        raise NonFinite("non-finite image features")
    return np.hstack([image_features, ehr])


def roc_auc(scores: Sequence[float], truths: Sequence[bool]) -> tuple[float, list[tuple[float, float]]]:
    """AUC as the tie-adjusted pairwise ranking probability, plus the ROC
    points at every distinct threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=bool)
    pos, neg = int(truths.sum()), int((~truths).sum())
    if pos == 0 or neg == 0:
        raise SingleClass("ROC needs at least one positive and one negative")
    ranks = rankdata(scores)  # average ranks handle ties as half-credit
    auc = (ranks[truths].sum() - pos * (pos + 1) / 2.0) / (pos * neg)

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_truths = truths[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    for i in range(len(scores)):
        tp += int(sorted_truths[i])
        fp += int(not sorted_truths[i])
        if i + 1 < len(scores) and sorted_scores[i + 1] == sorted_scores[i]:
            continue  # emit one point per distinct threshold
        points.append((fp / neg, tp / pos))
    return float(auc), points


def stratified_folds(
    targets: Sequence[bool], folds: int, seed: int
) -> list[np.ndarray]:
    """Deterministic stratified partition into `folds` index arrays.

    Indices of each class are shuffled then dealt round-robin, keeping
    every fold's class ratio within one sample of the global ratio.
    """
    targets = np.asarray(targets, dtype=bool)
    rng = np.random.default_rng(seed)
    assignments = np.empty(len(targets), dtype=np.int64)
    for cls in (False, True):
        idx = np.nonzero(targets == cls)[0]
        if len(idx) < folds:
            raise InsufficientSamples(
                f"class {cls} has {len(idx)} samples, need >= {folds}"
            )
        idx = idx[rng.permutation(len(idx))]
        assignments[idx] = np.arange(len(idx)) % folds
    return [np.nonzero(assignments == f)[0] for f in range(folds)]


@dataclass
class CvReport:
    fold_aucs: list[float]
    mean_auc: float
    sd_auc: float
    fold_scores: list[np.ndarray] = field(repr=False, default_factory=list)
    fold_truths: list[np.ndarray] = field(repr=False, default_factory=list)
    roc_points: list[list[tuple[float, float]]] = field(repr=False, default_factory=list)

    def to_json(self) -> dict:
        return {
            "fold_aucs": [float(a) for a in self.fold_aucs],
            "mean_auc": float(self.mean_auc),
            "sd_auc": float(self.sd_auc),
            "roc": [
                [[float(x), float(y)] for x, y in pts] for pts in self.roc_points
            ],
        }


def kfold_cv(
    X: np.ndarray,
    y: Sequence[bool],
    classifier_factory: Callable[[], BinaryClassifier],
    folds: int = 5,
    seed: int = 0,
) -> CvReport:
    """Stratified k-fold evaluation with fold-local standardization."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=bool)
    fold_idx = stratified_folds(y, folds, seed)
    aucs, all_scores, all_truths, rocs = [], [], [], []
    for f in range(folds):
        test_idx = fold_idx[f]
        train_idx = np.concatenate([fold_idx[g] for g in range(folds) if g != f])
        standardizer = Standardizer().fit(X[train_idx])
        clf = classifier_factory()
        clf.fit(standardizer.transform(X[train_idx]), y[train_idx])
        scores = clf.score(standardizer.transform(X[test_idx]))
        auc, points = roc_auc(scores, y[test_idx])
        aucs.append(auc)
        all_scores.append(np.asarray(scores))
        all_truths.append(y[test_idx])
        rocs.append(points)
    return CvReport(
        fold_aucs=aucs,
        mean_auc=float(np.mean(aucs)),
        sd_auc=float(np.std(aucs)),
        fold_scores=all_scores,
        fold_truths=all_truths,
        roc_points=rocs,
    )


class LogisticClassifier:
    """L2-regularized logistic regression with a deterministic solver.

    Expects already-standardized input (the CV loop owns that); stores
    coefficients so the model serializes to plain JSON.
    """

    def __init__(self, reg_weight: float = 1.0, max_iter: int = 1000):
        self.reg_weight = reg_weight
        self.max_iter = max_iter
        self.coef: np.ndarray | None = None
        self.intercept: float = 0.0

    def fit(self, X: np.ndarray, y: np.ndarray) -> "LogisticClassifier":
        from sklearn.linear_model import LogisticRegression

        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=int)
        if X.shape[1] == 0:
            raise SingularFit("no usable feature columns")
        if len(np.unique(y)) < 2:
            raise SingularFit("training labels are single-class")
        model = LogisticRegression(
            C=1.0 / self.reg_weight, solver="lbfgs", max_iter=self.max_iter
        )
        model.fit(X, y)
        self.coef = model.coef_[0].astype(np.float64)
        self.intercept = float(model.intercept_[0])
        return self

    def score(self, X: np.ndarray) -> np.ndarray:
        if self.coef is None:
            raise RuntimeError("classifier used before fit")
        z = np.asarray(X, dtype=np.float64) @ self.coef + self.intercept
        return 1.0 / (1.0 + np.exp(-z))


class CrossCombinerClassifier:
    """MLP (two 128-unit layers) plus a two-layer explicit feature-crossing
    branch, trained with Adam at lr 1e-4 for 10 epochs.  Optional,
    config-gated alternative to the logistic model."""

    def __init__(self, seed: int = 0, epochs: int = 10, lr: float = 1e-4,
                 hidden: int = 128, cross_layers: int = 2, batch_size: int = 32):
        self.seed = seed
        self.epochs = epochs
        self.lr = lr
        self.hidden = hidden
        self.cross_layers = cross_layers
        self.batch_size = batch_size
        self._net = None

    def _build(self, dim: int):
        import torch
        from torch import nn

        class CrossNet(nn.Module):
            def __init__(self, dim, layers):
                super().__init__()
                self.weights = nn.ParameterList(
                    [nn.Parameter(torch.zeros(dim)) for _ in range(layers)]
                )
                self.biases = nn.ParameterList(
                    [nn.Parameter(torch.zeros(dim)) for _ in range(layers)]
                )

            def forward(self, x0):
                x = x0
                for w, b in zip(self.weights, self.biases):
                    x = x0 * (x @ w)[:, None] + b + x
                return x

        class DeepCross(nn.Module):
            def __init__(self, dim, hidden, layers):
                super().__init__()
                self.deep = nn.Sequential(
                    nn.Linear(dim, hidden), nn.ReLU(),
                    nn.Linear(hidden, hidden), nn.ReLU(),
                )
                self.cross = CrossNet(dim, layers)
                self.head = nn.Linear(hidden + dim, 1)

            def forward(self, x):
                return self.head(torch.cat([self.deep(x), self.cross(x)], dim=1))[:, 0]

        return DeepCross(dim, self.hidden, self.cross_layers)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "CrossCombinerClassifier":
        import torch

        torch.manual_seed(self.seed)
        X = torch.from_numpy(np.asarray(X, dtype=np.float32))
        y = torch.from_numpy(np.asarray(y, dtype=np.float32))
        net = self._build(X.shape[1])
        opt = torch.optim.Adam(net.parameters(), lr=self.lr)
        loss_fn = torch.nn.BCEWithLogitsLoss()
        gen = torch.Generator().manual_seed(self.seed)
        for _ in range(self.epochs):
            order = torch.randperm(len(X), generator=gen)
            for start in range(0, len(X), self.batch_size):
                sel = order[start : start + self.batch_size]
                opt.zero_grad()
                loss = loss_fn(net(X[sel]), y[sel])
                loss.backward()
                opt.step()
        net.eval()
        self._net = net
        return self

    def score(self, X: np.ndarray) -> np.ndarray:
        import torch

        if self._net is None:
            raise RuntimeError("classifier used before fit")
        with torch.no_grad():
            logits = self._net(torch.from_numpy(np.asarray(X, dtype=np.float32)))
        return torch.sigmoid(logits).numpy().astype(np.float64)


def fit_classifier(kind: str, config: dict | None = None) -> BinaryClassifier:
    """Factory for the supported classifier kinds."""
    config = config or {}
    if kind == "logistic":
        return LogisticClassifier(reg_weight=float(config.get("reg_weight", 1.0)))
    if kind == "cross_combiner":
        return CrossCombinerClassifier(seed=int(config.get("seed", 0)))
    raise ValueError(f"unknown classifier kind {kind!r}")


def build_synthetic_cohort(
    records: Sequence[SynthRecord],
    seed: int = 0,
    noise_rate: float = 0.05,
    severity_threshold: float = 0.6,
) -> list[CohortRow]:
    """Derive a 17-column EHR table and an intervention target per record.

    Informative columns come from the synthetic clinical record; the 12
    vitals/labs columns carry only a weak severity trend plus noise.  The
    target is severity > threshold, flipped with probability noise_rate.
    """
    rng = np.random.default_rng(seed)
    rows = []
    for rec in records:
        c = rec.clinical
        s = rec.severity
        values: list[Optional[float]] = [
            c.age,
            1.0 if c.sex == "M" else 0.0,
            None if c.rale is None else float(c.rale),
            c.spo2,
            c.wbc,  # occasionally None
            round(36.8 + 1.2 * s + rng.normal(0, 0.4), 2),     # temperature
            round(78 + 22 * s + rng.normal(0, 9), 1),          # heart_rate
            round(16 + 8 * s + rng.normal(0, 3), 1),           # resp_rate
            round(122 - 8 * s + rng.normal(0, 12), 1),         # systolic_bp
            round(76 - 4 * s + rng.normal(0, 8), 1),           # diastolic_bp
            round(92 - 12 * s + rng.normal(0, 14), 1),         # gfr
            round(0.9 + 0.3 * s + rng.normal(0, 0.25), 2),     # creatinine
            round(max(0.0, 18 + 70 * s + rng.normal(0, 25)), 1),   # crp
            round(max(0.0, 0.4 + 1.4 * s + rng.normal(0, 0.5)), 2),  # d_dimer
            round(max(0.0, 250 + 420 * s + rng.normal(0, 180)), 0),  # ferritin
            round(max(0.1, 1.7 - 0.8 * s + rng.normal(0, 0.4)), 2),  # lymphocytes
            round(max(20.0, 240 - 40 * s + rng.normal(0, 55)), 0),   # platelets
        ]
        target = s > severity_threshold
        if rng.random() < noise_rate:
            target = not target
        rows.append(CohortRow(image_id=rec.record_id, ehr=values, target=bool(target)))
    return rows


def save_cohort(rows: Sequence[CohortRow], path: str | Path) -> Path:
    path = Path(path)
    try:
        with open(path, "w") as fh:
            for row in rows:
                fh.write(
                    json.dumps(
                        {"image_id": row.image_id, "ehr": row.ehr, "target": row.target}
                    )
                    + "\n"
                )
    except OSError as exc:
        raise IoError(f"cannot write cohort {path}: {exc}") from None
    return path


def load_cohort(path: str | Path) -> list[CohortRow]:
    path = Path(path)
    rows = []
    try:
        text = path.read_text()
    except OSError as exc:
        raise IoError(f"cannot read cohort {path}: {exc}") from None
    for line_no, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            ehr = [None if v is None else float(v) for v in obj["ehr"]]
            rows.append(
                CohortRow(
                    image_id=str(obj["image_id"]),
                    ehr=ehr,
                    target=bool(obj["target"]),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad cohort row at line {line_no}: {exc}") from None
        if len(ehr) != len(EHR_SCHEMA):
            raise SchemaError(
                f"cohort row {line_no} has {len(ehr)} EHR values, "
                f"schema expects {len(EHR_SCHEMA)}"
            )
    return rows


def ehr_matrix(rows: Sequence[CohortRow]) -> np.ndarray:
    """Cohort EHR values as a float matrix with NaN for missing entries."""
    out = np.full((len(rows), len(EHR_SCHEMA)), np.nan)
    for i, row in enumerate(rows):
        for j, v in enumerate(row.ehr):
            if v is not None:
                out[i, j] = v
    return out


@dataclass
class TransferArtifact:
    """A fitted fused-feature scoring pipeline, serializable to JSON.

    Bundles the fold-free standardizer (fit on the whole cohort) and the
    logistic coefficients, tagged with the embedder's content hash so a
    service can refuse features from a different model.
    """

    standardizer: Standardizer
    classifier: LogisticClassifier
    model_hash: str = ""
    schema: tuple[str, ...] = EHR_SCHEMA

    def score_one(self, image_features: np.ndarray, ehr_values: Sequence[Optional[float]]) -> float:
        if len(ehr_values) != len(self.schema):
            raise SchemaError(
                f"expected {len(self.schema)} EHR values, got {len(ehr_values)}"
            )
        ehr = np.array(
            [np.nan if v is None else float(v) for v in ehr_values], dtype=np.float64
        )
        fused = fuse(image_features[None, :], ehr[None, :])
        return float(self.classifier.score(self.standardizer.transform(fused))[0])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        s = self.standardizer
        doc = {
            "model_hash": self.model_hash,
            "schema": list(self.schema),
            "standardizer": {
                "medians": s.medians.tolist(),
                "means": s.means.tolist(),
                "stds": s.stds.tolist(),
                "keep": s.keep.astype(int).tolist(),
                "indicator_cols": s.indicator_cols.tolist(),
            },
            "classifier": {
                "coef": self.classifier.coef.tolist(),
                "intercept": self.classifier.intercept,
                "reg_weight": self.classifier.reg_weight,
            },
        }
        try:
            path.write_text(json.dumps(doc))
        except OSError as exc:
            raise IoError(f"cannot write transfer artifact {path}: {exc}") from None
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TransferArtifact":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise IoError(f"cannot read transfer artifact {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise SchemaError(f"bad transfer artifact: {exc}") from None
        try:
            s = Standardizer()
            sd = doc["standardizer"]
            s.medians = np.asarray(sd["medians"], dtype=np.float64)
            s.means = np.asarray(sd["means"], dtype=np.float64)
            s.stds = np.asarray(sd["stds"], dtype=np.float64)
            s.keep = np.asarray(sd["keep"], dtype=bool)
            s.indicator_cols = np.asarray(sd["indicator_cols"], dtype=np.int64)
            clf = LogisticClassifier(reg_weight=float(doc["classifier"]["reg_weight"]))
            clf.coef = np.asarray(doc["classifier"]["coef"], dtype=np.float64)
            clf.intercept = float(doc["classifier"]["intercept"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad transfer artifact fields: {exc}") from None
        return cls(
            standardizer=s,
            classifier=clf,
            model_hash=str(doc.get("model_hash", "")),
            schema=tuple(doc.get("schema", EHR_SCHEMA)),
        )


def fit_transfer_artifact(
    image_features: np.ndarray,
    cohort: Sequence[CohortRow],
    model_hash: str = "",
    reg_weight: float = 1.0,
) -> TransferArtifact:
    """Fit the fused logistic pipeline on the whole cohort for serving."""
    fused = fuse(image_features, ehr_matrix(cohort))
    y = np.array([row.target for row in cohort], dtype=int)
    standardizer = Standardizer().fit(fused)
    clf = LogisticClassifier(reg_weight=reg_weight).fit(standardizer.transform(fused), y)
    return TransferArtifact(
        standardizer=standardizer, classifier=clf, model_hash=model_hash
    )
