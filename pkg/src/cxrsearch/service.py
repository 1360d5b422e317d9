"""HTTP JSON API for query-by-image retrieval with attention overlays.

The app serves an immutable snapshot (checkpoint, index, manifest); all
request handling is read-only apart from an overlay cache that tolerates
racy duplicate computation.  A strict-mode hash disagreement between the
checkpoint and the index turns every inference endpoint into a 409 so the
operator rebuilds the index instead of silently mixing embedding spaces.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from fastapi.responses import Response
from PIL import Image

from .core import ClinicalRecord, DatasetManifest, load_manifest
from .embedder import (
    ModelCheckpoint,
    attention_map,
    embed,
    features,
    load_checkpoint,
)
from .errors import ShapeMismatch
from .preprocess import (
    ImageBuffer,
    decode_image_bytes,
    load_image,
    normalize_intensity,
    resize_fixed_aspect,
)
from .retrieval import EmbeddingIndex, knn_classify, load_index, query_topk
from .transfer import EHR_SCHEMA, TransferArtifact

OVERLAY_ALPHA = 0.4


@dataclass
class ServiceConfig:
    checkpoint: str = ""
    index: str = ""
    manifest: str = ""
    host: str = "127.0.0.1"
    port: int = 8000
    default_k: int = 10
    k_min: int = 1
    k_max: int = 30
    strict_hash: bool = True
    classifier: str = ""  # optional transfer artifact path
    static_dir: str = ""  # optional built web UI to serve at /

    def __post_init__(self):
        if not (1 <= self.k_min <= self.default_k <= self.k_max <= 30):
            raise ValueError(
                f"k bounds ({self.k_min}, {self.default_k}, {self.k_max}) invalid"
            )

    @classmethod
    def from_json(cls, obj: dict) -> "ServiceConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in obj.items() if k in known})


def _colormap_lut() -> np.ndarray:
    # fixed perceptually-uniform map; imported lazily, sampled once
    import matplotlib

    cmap = matplotlib.colormaps["viridis"]
    return (np.asarray(cmap(np.linspace(0, 1, 256)))[:, :3] * 255).astype(np.float64)


_LUT: Optional[np.ndarray] = None


def render_attention_overlay(image: ImageBuffer, mask: np.ndarray) -> bytes:
    """Blend the upsampled attention mask over the grayscale image as PNG.

    Mask values index a fixed colormap; the colored layer is alpha-blended
    at 0.4.  Output bytes are deterministic for fixed inputs.
    """
    global _LUT
    if _LUT is None:
        _LUT = _colormap_lut()
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise ShapeMismatch(f"mask must be 2-d, got shape {mask.shape}")
    h, w = image.pixels.shape
    up = Image.fromarray(mask.astype(np.float32), mode="F").resize((w, h), Image.BILINEAR)
    up_arr = np.clip(np.asarray(up, dtype=np.float64), 0.0, 1.0)
    colored = _LUT[np.round(up_arr * 255).astype(np.intp)]
    gray = np.clip(image.pixels, 0.0, 1.0)[..., None] * 255.0
    blended = (1.0 - OVERLAY_ALPHA) * gray + OVERLAY_ALPHA * colored
    out = Image.fromarray(np.round(blended).astype(np.uint8), mode="RGB")
    buf = io.BytesIO()
    out.save(buf, format="PNG")
    return buf.getvalue()


@dataclass
class ServiceState:
    config: ServiceConfig
    model: ModelCheckpoint
    index: EmbeddingIndex
    manifest: DatasetManifest
    artifact: Optional[TransferArtifact] = None
    overlay_cache: dict[str, bytes] = field(default_factory=dict)
    query_images: dict[str, ImageBuffer] = field(default_factory=dict)

    def __post_init__(self):
        self._records_by_id = {r.id: r for r in self.manifest.images}

    @property
    def hash_ok(self) -> bool:
        if not self.config.strict_hash:
            return True
        return self.index.model_hash == self.model.content_hash

    def record(self, image_id: str):
        return self._records_by_id.get(image_id)

    def preprocess(self, image: ImageBuffer) -> ImageBuffer:
        return resize_fixed_aspect(
            normalize_intensity(image), self.model.config.input_side
        )

    def remember_query(self, query_id: str, buf: ImageBuffer) -> None:
        # bounded cache so long-running services do not accumulate uploads
        if len(self.query_images) >= 64:
            self.query_images.pop(next(iter(self.query_images)))
        self.query_images[query_id] = buf

    def buffer_for(self, image_id: str) -> Optional[ImageBuffer]:
        if image_id in self.query_images:
            return self.query_images[image_id]
        rec = self.record(image_id)
        if rec is None:
            return None
        return self.preprocess(load_image(rec.path))

    def overlay_png(self, image_id: str) -> Optional[bytes]:
        cache_key = f"{image_id}:{self.model.content_hash[:12]}"
        if cache_key in self.overlay_cache:
            return self.overlay_cache[cache_key]
        buf = self.buffer_for(image_id)
        if buf is None:
            return None
        png = render_attention_overlay(buf, attention_map(self.model, buf))
        self.overlay_cache[cache_key] = png
        return png


def _clinical_json(clinical: Optional[ClinicalRecord]) -> dict:
    return clinical.to_json() if clinical is not None else {}


def load_state(config: ServiceConfig) -> ServiceState:
    model = load_checkpoint(config.checkpoint)
    index = load_index(config.index)
    manifest = load_manifest(config.manifest)
    artifact = TransferArtifact.load(config.classifier) if config.classifier else None
    return ServiceState(
        config=config, model=model, index=index, manifest=manifest, artifact=artifact
    )


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="cxrsearch")
    clinical_by_id = {
        r.id: r.clinical for r in state.manifest.images if r.clinical is not None
    }

    def guard_hash():
        if not state.hash_ok:
            raise HTTPException(
                status_code=409,
                detail="index model hash does not match the loaded checkpoint; rebuild the index",
            )

    @app.get("/api/health")
    def health():
        return {
            "status": "ok" if state.hash_ok else "hash_mismatch",
            "index_size": len(state.index),
            "model_hash": state.model.content_hash,
            "k_default": state.config.default_k,
            "k_min": state.config.k_min,
            "k_max": state.config.k_max,
            "predict_available": state.artifact is not None,
            "sample_ids": list(state.index.ids[:8]),
        }

    @app.post("/api/query")
    async def query(image: UploadFile = File(...), k: Optional[int] = Form(None)):
        guard_hash()
        t0 = time.perf_counter()
        k = state.config.default_k if k is None else int(k)
        if not (state.config.k_min <= k <= state.config.k_max):
            raise HTTPException(
                status_code=400,
                detail=f"k must be within [{state.config.k_min}, {state.config.k_max}]",
            )
        raw = await image.read()
        try:
            decoded = decode_image_bytes(raw)
        except Exception:
            raise HTTPException(status_code=400, detail="cannot decode image") from None

        buf = state.preprocess(decoded)
        query_id = "query-" + hashlib.sha1(raw).hexdigest()[:12]
        state.remember_query(query_id, buf)

        vector = embed(state.model, buf)
        result = query_topk(state.index, vector, k, clinical=clinical_by_id)
        predicted, scores = knn_classify(result)
        timing_ms = (time.perf_counter() - t0) * 1000.0
        return {
            "predicted_label": predicted.json_name,
            "class_scores": {c.json_name: scores[c] for c in scores},
            "results": [
                {
                    "id": e.id,
                    "label": e.label.json_name,
                    "similarity": e.similarity,
                    "clinical": _clinical_json(e.clinical),
                    "thumbnail_url": f"/api/images/{e.id}",
                    "overlay_url": f"/api/overlays/{e.id}",
                }
                for e in result
            ],
            "query_overlay_url": f"/api/overlays/{query_id}",
            "timing_ms": timing_ms,
        }

    @app.get("/api/images/{image_id}")
    def image_file(image_id: str):
        rec = state.record(image_id)
        if rec is None:
            raise HTTPException(status_code=404, detail=f"unknown image id {image_id!r}")
        data = Path(rec.path).read_bytes()
        media = "image/png" if rec.path.lower().endswith(".png") else "image/jpeg"
        return Response(content=data, media_type=media)

    @app.get("/api/overlays/{image_id}")
    def overlay(image_id: str):
        guard_hash()
        png = state.overlay_png(image_id)
        if png is None:
            raise HTTPException(status_code=404, detail=f"unknown image id {image_id!r}")
        return Response(content=png, media_type="image/png")

    @app.post("/api/predict-intervention")
    async def predict_intervention(payload: dict):
        guard_hash()
        if state.artifact is None:
            raise HTTPException(
                status_code=409, detail="no transfer classifier artifact configured"
            )
        if state.config.strict_hash and state.artifact.model_hash not in (
            "",
            state.model.content_hash,
        ):
            raise HTTPException(
                status_code=409,
                detail="transfer artifact was fitted with a different model; refit it",
            )
        ehr = payload.get("ehr")
        if not isinstance(ehr, list) or len(ehr) != len(EHR_SCHEMA):
            raise HTTPException(
                status_code=400, detail=f"ehr must be a list of {len(EHR_SCHEMA)} numbers"
            )
        image_ref = payload.get("image")
        if not isinstance(image_ref, str) or not image_ref:
            raise HTTPException(status_code=400, detail="image must be an id or base64 PNG")
        buf = state.buffer_for(image_ref)
        if buf is None:
            try:
                raw = base64.b64decode(image_ref, validate=True)
                buf = state.preprocess(decode_image_bytes(raw))
            except (binascii.Error, OSError, ValueError):
                raise HTTPException(
                    status_code=404, detail="image id unknown and not decodable base64"
                ) from None
        probability = state.artifact.score_one(features(state.model, buf), ehr)
        return {"probability": probability}

    if state.config.static_dir and Path(state.config.static_dir).exists():
        from fastapi.staticfiles import StaticFiles

        app.mount(
            "/", StaticFiles(directory=state.config.static_dir, html=True), name="ui"
        )

    return app


def serve(config: ServiceConfig) -> None:
    import uvicorn

    state = load_state(config)
    app = create_app(state)
    uvicorn.run(app, host=config.host, port=config.port)
