"""Command-line interface.

Every command accepts --config (a JSON file of defaults, overridden by
flags) and --seed, writes a machine-readable JSON report, and exits 0 on
success / 1 on runtime failure (usage errors exit 2 via click).
"""

from __future__ import annotations

import functools
import json
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np

from . import core, embedder, harness, metric, retrieval, synthdata, transfer
from .errors import CxrSearchError
from .service import ServiceConfig


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise click.UsageError(f"cannot read config {path}: {exc}")
    if not isinstance(obj, dict):
        raise click.UsageError(f"config {path} must be a JSON object")
    return obj


def _merge(config: dict, ctx: click.Context, **flags) -> dict:
    """Config-file values fill in any flag the user left at its default."""
    merged = dict(flags)
    for key, value in config.items():
        norm = key.replace("-", "_")
        if norm in merged and ctx.get_parameter_source(norm) == click.core.ParameterSource.DEFAULT:
            merged[norm] = value
    return merged


def _emit(report: dict, report_path: str | None) -> None:
    text = json.dumps(report, indent=2)
    if report_path:
        Path(report_path).write_text(text)
    click.echo(text)


def _runtime_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except CxrSearchError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


def common_options(fn):
    fn = click.option("--config", "config_path", default=None, help="JSON config file; flags win.")(fn)
    fn = click.option("--seed", default=0, show_default=True, type=int)(fn)
    fn = click.option("--report", "report_path", default=None, help="Write the JSON report here too.")(fn)
    return fn


@click.group()
def main():
    """Chest-radiograph retrieval toolkit."""


@main.command()
@common_options
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--per-class", default=50, show_default=True, type=int)
@click.option("--side", default=256, show_default=True, type=int)
@click.option("--val-fraction", default=0.2, show_default=True, type=float)
@click.option("--cohort/--no-cohort", default=True, show_default=True,
              help="Also derive a synthetic EHR cohort file.")
@click.pass_context
@_runtime_errors
def synth(ctx, config_path, seed, report_path, out_dir, per_class, side, val_fraction, cohort):
    """Generate a synthetic dataset (images, lesion masks, manifest)."""
    opts = _merge(_load_config(config_path), ctx, per_class=per_class, side=side,
                  val_fraction=val_fraction, seed=seed)
    cfg = synthdata.SynthConfig(
        per_class_counts=(opts["per_class"],) * 3, side=opts["side"], seed=opts["seed"]
    )
    manifest, records = synthdata.generate_dataset(cfg)
    manifest_path = synthdata.export(records, out_dir)
    manifest = core.load_manifest(manifest_path)
    manifest = core.split_stratified(manifest, opts["val_fraction"], opts["seed"])
    core.save_manifest(manifest, manifest_path)
    report = {
        "manifest": str(manifest_path),
        "images": len(manifest.images),
        "per_split": {
            split: {c.json_name: n for c, n in manifest.label_counts(split).items()}
            for split in ("train", "val")
        },
    }
    if cohort:
        rows = transfer.build_synthetic_cohort(records, seed=opts["seed"])
        cohort_path = transfer.save_cohort(rows, Path(out_dir) / "cohort.jsonl")
        report["cohort"] = str(cohort_path)
    _emit(report, report_path)


def _train_options(fn):
    fn = click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))(fn)
    fn = click.option("--iterations", default=2000, show_default=True, type=int)(fn)
    fn = click.option("--lr", default=3e-5, show_default=True, type=float)(fn)
    fn = click.option("--alpha", default=2.0, show_default=True, type=float)(fn)
    fn = click.option("--beta", default=20.0, show_default=True, type=float)(fn)
    fn = click.option("--lam", default=0.5, show_default=True, type=float)(fn)
    fn = click.option("--epsilon-mine", default=0.1, show_default=True, type=float)(fn)
    fn = click.option("--classes-per-batch", default=3, show_default=True, type=int)(fn)
    fn = click.option("--samples-per-class", default=16, show_default=True, type=int)(fn)
    fn = click.option("--temperature", default=0.1, show_default=True, type=float)(fn)
    fn = click.option("--embed-dim", default=64, show_default=True, type=int)(fn)
    fn = click.option("--input-side", default=256, show_default=True, type=int)(fn)
    return fn


def _loss_cfg_from(opts: dict) -> metric.LossConfig:
    return metric.LossConfig(
        alpha=opts["alpha"], beta=opts["beta"], lam=opts["lam"],
        epsilon_mine=opts["epsilon_mine"],
        classes_per_batch=opts["classes_per_batch"],
        samples_per_class=opts["samples_per_class"],
        lr=opts["lr"], iterations=opts["iterations"],
        temperature=opts["temperature"], seed=opts["seed"],
    )


def _embed_cfg_from(opts: dict) -> embedder.EmbedderConfig:
    return embedder.EmbedderConfig(
        input_side=opts["input_side"],
        stage2_grid=opts["input_side"] // embedder.TOTAL_STRIDE,
        embed_dim=opts["embed_dim"],
        seed=opts["seed"],
    )


@main.command()
@common_options
@_train_options
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--loss", "loss_kind", default="ms", show_default=True,
              type=click.Choice(["ms", "infonce"]))
@click.option("--attention/--no-attention", default=True, show_default=True)
@click.option("--log-every", default=100, show_default=True, type=int)
@click.pass_context
@_runtime_errors
def train(ctx, config_path, seed, report_path, manifest_path, out_dir, loss_kind,
          attention, log_every, **train_flags):
    """Train the embedder on a manifest's train split."""
    opts = _merge(_load_config(config_path), ctx, seed=seed, **train_flags)
    manifest = core.load_manifest(manifest_path)
    loss_cfg = _loss_cfg_from(opts)
    model = embedder.init_model(_embed_cfg_from(opts))
    result = metric.train(
        model, manifest, loss_cfg, loss_kind=loss_kind,
        use_attention=attention, log_every=log_every,
    )
    out = embedder.save_checkpoint(result.checkpoint, out_dir)
    trace_path = metric.write_loss_trace(result, Path(out_dir) / "loss_trace.csv")
    _emit(
        {
            "checkpoint": str(out),
            "loss_trace": str(trace_path),
            "iterations": loss_cfg.iterations,
            "final_loss": result.trace[-1][1] if result.trace else None,
            "model_hash": result.checkpoint.content_hash,
        },
        report_path,
    )


@main.command()
@common_options
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--split", default="train", show_default=True,
              type=click.Choice(["train", "val", "all"]))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
@_runtime_errors
def embed(ctx, config_path, seed, report_path, checkpoint_path, manifest_path, split, out_path):
    """Embed a manifest split and write the embedding store."""
    model = embedder.load_checkpoint(checkpoint_path)
    manifest = core.load_manifest(manifest_path)
    records, matrix = harness.embed_split(
        model, manifest, None if split == "all" else split
    )
    index = retrieval.build_index(
        matrix, [r.id for r in records], [r.label for r in records],
        model_hash=model.content_hash,
    )
    retrieval.save_index(index, out_path)
    _emit({"store": str(out_path), "rows": len(index), "dim": index.dim,
           "model_hash": model.content_hash}, report_path)


@main.command()
@common_options
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.pass_context
@_runtime_errors
def index(ctx, config_path, seed, report_path, checkpoint_path, manifest_path, out_path):
    """Build the retrieval gallery index from the train split."""
    model = embedder.load_checkpoint(checkpoint_path)
    manifest = core.load_manifest(manifest_path)
    gallery = harness.build_gallery_index(model, manifest, "train")
    retrieval.save_index(gallery, out_path)
    _emit({"index": str(out_path), "rows": len(gallery), "dim": gallery.dim,
           "model_hash": gallery.model_hash}, report_path)


@main.command()
@common_options
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", default=None, type=click.Path(exists=True),
              help="Attach clinical records to results.")
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--k", default=10, show_default=True, type=int)
@click.pass_context
@_runtime_errors
def query(ctx, config_path, seed, report_path, checkpoint_path, index_path,
          manifest_path, image_path, k):
    """Retrieve the top-k most similar gallery images for one query image."""
    model = embedder.load_checkpoint(checkpoint_path)
    gallery = retrieval.load_index(
        index_path, expect_model_hash=model.content_hash, strict=True
    )
    clinical = {}
    if manifest_path:
        manifest = core.load_manifest(manifest_path)
        clinical = {r.id: r.clinical for r in manifest.images if r.clinical is not None}
    from .preprocess import preprocess_eval

    buf = preprocess_eval(image_path, model.config.input_side)
    vector = embedder.embed(model, buf)
    result = retrieval.query_topk(gallery, vector, k, clinical=clinical)
    label, scores = retrieval.knn_classify(result)
    _emit(
        {
            "predicted_label": label.json_name,
            "class_scores": {c.json_name: s for c, s in scores.items()},
            "results": [
                {
                    "id": e.id,
                    "label": e.label.json_name,
                    "similarity": e.similarity,
                    "clinical": e.clinical.to_json() if e.clinical else {},
                }
                for e in result
            ],
        },
        report_path,
    )


@main.command(name="eval-retrieval")
@common_options
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--k", default=4, show_default=True, type=int)
@click.option("--baseline-trials", default=100_000, show_default=True, type=int)
@click.pass_context
@_runtime_errors
def eval_retrieval(ctx, config_path, seed, report_path, checkpoint_path,
                   manifest_path, k, baseline_trials):
    """Recall@k of val queries against the train gallery, plus the
    Monte Carlo random-retrieval baseline."""
    model = embedder.load_checkpoint(checkpoint_path)
    manifest = core.load_manifest(manifest_path)
    gallery = harness.build_gallery_index(model, manifest, "train")
    queries = harness.query_points(model, manifest, "val")
    recall = retrieval.eval_recall_at_k(gallery, queries, k)
    baseline = retrieval.random_baseline_recall(
        manifest.label_counts("train"), k, trials=baseline_trials, seed=seed
    )
    click.echo(f"recall@{k} per class (random baseline in parentheses):", err=True)
    for name, value in recall["per_class"].items():
        base = baseline["per_class"][name]
        value_s = "n/a" if value is None else f"{value:7.3f}"
        base_s = "n/a" if base is None else f"{base:.3f}"
        click.echo(f"  {name:>10}  {value_s}  ({base_s})", err=True)
    click.echo(f"  {'overall':>10}  {recall['overall']:7.3f}  ({baseline['overall']:.3f})", err=True)
    _emit({"recall": recall, "random_baseline": baseline}, report_path)


@main.command(name="eval-diagnosis")
@common_options
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--k", default=10, show_default=True, type=int)
@click.pass_context
@_runtime_errors
def eval_diagnosis_cmd(ctx, config_path, seed, report_path, checkpoint_path, manifest_path, k):
    """Weighted-KNN diagnosis metrics of val queries against the train gallery."""
    model = embedder.load_checkpoint(checkpoint_path)
    manifest = core.load_manifest(manifest_path)
    gallery = harness.build_gallery_index(model, manifest, "train")
    queries = harness.query_points(model, manifest, "val")
    report = retrieval.eval_diagnosis(gallery, queries, k)
    doc = report.to_json()
    click.echo(f"accuracy {doc['accuracy']:.3f} over {doc['n_queries']} queries", err=True)
    click.echo(f"  {'class':>10}  {'sens':>6}  {'ppv':>6}", err=True)
    for name in doc["sensitivity"]:
        sens, ppv = doc["sensitivity"][name], doc["ppv"][name]
        click.echo(
            f"  {name:>10}  "
            f"{'n/a' if sens is None else format(sens, '6.3f')}  "
            f"{'n/a' if ppv is None else format(ppv, '6.3f')}",
            err=True,
        )
    _emit(doc, report_path)


@main.command(name="eval-transfer")
@common_options
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--cohort", "cohort_path", required=True, type=click.Path(exists=True))
@click.option("--folds", default=5, show_default=True, type=int)
@click.option("--classifier", "classifier_kind", default="logistic", show_default=True,
              type=click.Choice(["logistic", "cross_combiner"]))
@click.option("--save-artifact", "artifact_path", default=None, type=click.Path(),
              help="Also fit on the full cohort and save a serving artifact.")
@click.pass_context
@_runtime_errors
def eval_transfer(ctx, config_path, seed, report_path, checkpoint_path, manifest_path,
                  cohort_path, folds, classifier_kind, artifact_path):
    """Cross-validated intervention prediction from fused image+EHR features."""
    model = embedder.load_checkpoint(checkpoint_path)
    manifest = core.load_manifest(manifest_path)
    cohort = transfer.load_cohort(cohort_path)
    ids = [row.image_id for row in cohort]
    image_features = transfer.extract_feature_matrix(model, manifest, ids)
    ehr = transfer.ehr_matrix(cohort)
    y = [row.target for row in cohort]

    def factory():
        return transfer.fit_classifier(classifier_kind, {"seed": seed})

    reports = {
        "fused": transfer.kfold_cv(transfer.fuse(image_features, ehr), y, factory, folds, seed),
        "image_only": transfer.kfold_cv(image_features, y, factory, folds, seed),
        "ehr_only": transfer.kfold_cv(ehr, y, factory, folds, seed),
    }
    out = {name: rep.to_json() for name, rep in reports.items()}
    if artifact_path:
        artifact = transfer.fit_transfer_artifact(
            image_features, cohort, model_hash=model.content_hash
        )
        artifact.save(artifact_path)
        out["artifact"] = str(artifact_path)
    _emit(out, report_path)


def _parse_values(param: str, values: str) -> list:
    parts: list[str] = []
    for chunk in values.split(","):
        chunk = chunk.strip()
        if ".." in chunk:
            lo, hi = chunk.split("..")
            parts.extend(str(v) for v in range(int(lo), int(hi) + 1))
        elif chunk:
            parts.append(chunk)
    if param == "attention":
        return [p.lower() in ("1", "true", "on", "yes") for p in parts]
    if param == "loss":
        return parts
    return [int(p) for p in parts]


@main.command()
@common_options
@_train_options
@click.option("--param", required=True,
              type=click.Choice(["attention", "loss", "k", "embed-dim"]))
@click.option("--values", required=True,
              help="Comma list; ranges like 1..30 expand inclusively.")
@click.option("--recall-k", default=4, show_default=True, type=int)
@click.option("--log-every", default=0, show_default=True, type=int)
@click.pass_context
@_runtime_errors
def ablate(ctx, config_path, seed, report_path, manifest_path, param, values,
           recall_k, log_every, **train_flags):
    """Sweep one hyperparameter and tabulate accuracy/recall per value."""
    opts = _merge(_load_config(config_path), ctx, seed=seed, **train_flags)
    manifest = core.load_manifest(manifest_path)
    rows = harness.ablate(
        param, _parse_values(param, values), manifest,
        _embed_cfg_from(opts), _loss_cfg_from(opts),
        recall_k=recall_k, log_every=log_every,
    )
    header = [k for k in rows[0] if k not in ("recall_per_class",)]
    click.echo("  ".join(f"{h:>14}" for h in header), err=True)
    for row in rows:
        click.echo(
            "  ".join(
                f"{row[h]:>14.4f}" if isinstance(row[h], float) else f"{str(row[h]):>14}"
                for h in header
            ),
            err=True,
        )
    _emit({"param": param, "rows": rows}, report_path)


@main.command()
@common_options
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--index", "index_path", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
@click.option("--k", "default_k", default=10, show_default=True, type=int)
@click.option("--strict-hash/--no-strict-hash", default=True, show_default=True)
@click.option("--classifier", "classifier_path", default=None, type=click.Path(exists=True))
@click.option("--static-dir", default=None, type=click.Path())
@click.pass_context
@_runtime_errors
def serve(ctx, config_path, seed, report_path, checkpoint_path, index_path, manifest_path,
          host, port, default_k, strict_hash, classifier_path, static_dir):
    """Serve the HTTP JSON API (and the web UI when static-dir is built)."""
    opts = _merge(
        _load_config(config_path), ctx,
        checkpoint=checkpoint_path, index=index_path, manifest=manifest_path,
        host=host, port=port, default_k=default_k, strict_hash=strict_hash,
        classifier=classifier_path or "", static_dir=static_dir or "",
    )
    from .service import serve as run_service

    run_service(ServiceConfig(**{k: v for k, v in opts.items() if k != "seed"}))


if __name__ == "__main__":
    main()
