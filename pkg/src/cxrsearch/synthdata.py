"""Synthetic lung-like radiograph generator.

Renders two-ellipse lung fields over a noisy textured background and
plants class-dependent bright lesions: a unilateral focal cluster for
pneumonia, bilateral peripheral diffuse blobs for covid, none for
controls.  Per-image nuisance (brightness, texture phase/amplitude, lung
geometry jitter) is deliberately strong so that untrained global image
statistics carry little class signal, while the lesion patterns stay
learnable.  Everything is derived from per-record spawned seeds, so a
given config is bit-reproducible and parallelizable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import (
    ClassLabel,
    ClinicalRecord,
    DatasetManifest,
    ImageRecord,
    save_manifest,
)
from .errors import IoError
from .preprocess import ImageBuffer

# severity -> clinical record constants
RALE_MAX = 48  # 4 quadrants x 12, Warren et al. scheme
BILATERALITY = {ClassLabel.NonCovidPneumonia: 0.5, ClassLabel.Covid19: 1.0}

# lesion area budget as a fraction of the image, per unit severity
_AREA_BUDGET = {ClassLabel.NonCovidPneumonia: 0.09, ClassLabel.Covid19: 0.13}


@dataclass
class SynthConfig:
    per_class_counts: tuple[int, int, int] = (20, 20, 20)
    side: int = 256
    severity_range: tuple[float, float] = (0.15, 1.0)
    seed: int = 0
    sites: tuple[str, ...] = ("siteA", "siteB")
    site_brightness: float = 0.0  # optional per-site intensity offset
    markers: bool = False  # burned-in glyph blocks outside the lungs
    decoys: bool = False  # lesion-like bumps outside the lungs
    lung_texture: float = 0.04  # in-lung random texture amplitude

    def __post_init__(self):
        if self.side < 64:
            raise ValueError(f"side {self.side} < 64")
        if any(c < 0 for c in self.per_class_counts):
            raise ValueError("per_class_counts must be >= 0")
        lo, hi = self.severity_range
        if not (0 <= lo <= hi <= 1):
            raise ValueError(f"severity_range {self.severity_range} invalid")


@dataclass
class SynthRecord:
    image: ImageBuffer
    label: ClassLabel
    lesion_mask: np.ndarray
    severity: float
    clinical: ClinicalRecord
    record_id: str = ""
    site: str = ""


def _lung_field(
    cfg: SynthConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Background + two elliptical lungs. Returns (image, left mask, right mask)."""
    side = cfg.side
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) / side

    base = 0.18 + rng.uniform(-0.06, 0.06)
    img = np.full((side, side), base)

    # smooth low-frequency texture with random phase/amplitude (kept well
    # below lesion spatial scale) plus rib-like horizontal stripes
    for _ in range(3):
        fy, fx = rng.uniform(0.8, 2.5, size=2)
        phase = rng.uniform(0, 2 * math.pi, size=2)
        amp = rng.uniform(0.02, 0.06)
        img += amp * np.sin(2 * math.pi * fy * yy + phase[0]) * np.sin(
            2 * math.pi * fx * xx + phase[1]
        )
    img += rng.uniform(0.01, 0.03) * np.sin(2 * math.pi * rng.uniform(8, 14) * yy + rng.uniform(0, 6))

    lungs = []
    for side_sign in (-1.0, 1.0):
        cx = 0.5 + side_sign * (0.22 + rng.uniform(-0.02, 0.02))
        cy = 0.52 + rng.uniform(-0.03, 0.03)
        rx = 0.16 + rng.uniform(-0.015, 0.015)
        ry = 0.30 + rng.uniform(-0.02, 0.02)
        ellipse = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        lungs.append(ellipse)
    lung_gain = 0.30 + rng.uniform(-0.05, 0.05)
    lung = lungs[0] | lungs[1]
    img += lung_gain * lung

    # vascular-marking analog: mid-frequency texture confined to the lungs,
    # fully random per image so it is pure nuisance for same-class matching
    if cfg.lung_texture > 0:
        for _ in range(2):
            freq = rng.uniform(7, 15, size=2)
            phase = rng.uniform(0, 2 * math.pi, size=2)
            amp = rng.uniform(0.5, 1.0) * cfg.lung_texture
            wave = np.sin(2 * math.pi * freq[0] * yy + phase[0]) * np.sin(
                2 * math.pi * freq[1] * xx + phase[1]
            )
            img += amp * wave * lung

    if cfg.markers:
        _add_markers(img, lung, rng)
    img += rng.normal(0.0, 0.02, size=(side, side))
    return img, lungs[0], lungs[1]


def _add_markers(img: np.ndarray, lung: np.ndarray, rng: np.random.Generator) -> None:
    """Bright text-like glyph blocks near the borders, clear of the lungs.

    Mimics burned-in annotations: their position/content varies per image,
    so they are pure nuisance for matching same-class pairs.
    """
    side = img.shape[0]
    corners = [(0.06, 0.06), (0.06, 0.80), (0.80, 0.06), (0.80, 0.80), (0.04, 0.42)]
    picks = rng.permutation(len(corners))[: int(rng.integers(1, 4))]
    for p in picks:
        oy, ox = corners[p]
        y0 = int(oy * side + rng.integers(0, side // 16))
        x0 = int(ox * side + rng.integers(0, side // 16))
        gh, gw = int(rng.integers(2, 4)), int(rng.integers(4, 9))
        cell = max(side // 64, 2)
        glyph = rng.random((gh, gw)) < 0.6
        block = np.kron(glyph, np.ones((cell, cell)))
        y1, x1 = min(y0 + block.shape[0], side), min(x0 + block.shape[1], side)
        region = block[: y1 - y0, : x1 - x0] * (~lung[y0:y1, x0:x1])
        img[y0:y1, x0:x1] += rng.uniform(0.45, 0.75) * region


def _place_blobs(
    img: np.ndarray,
    lesion: np.ndarray,
    region: np.ndarray,
    centers: np.ndarray,
    radii: np.ndarray,
    rng: np.random.Generator,
) -> None:
    """Add gaussian bumps at given centers, restricted to the lung region."""
    side = img.shape[0]
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    for (cy, cx), r in zip(centers, radii):
        bump = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (r / 2.0) ** 2)))
        contrast = rng.uniform(0.20, 0.30)
        img += contrast * bump * region
        lesion |= (bump > 0.35) & region


def _sample_in_region(region: np.ndarray, n: int, rng: np.random.Generator,
                      peripheral: bool, margin: float = 0.0) -> np.ndarray:
    """Draw n pixel centers inside `region`.

    `margin` keeps centers that far from the region border (so blobs are
    not clipped away); peripheral sampling prefers the outer ring.
    """
    if margin > 0:
        from scipy.ndimage import distance_transform_edt

        interior = distance_transform_edt(region) >= margin
        if interior.any():
            region = interior
    ys, xs = np.nonzero(region)
    if peripheral:
        cy, cx = ys.mean(), xs.mean()
        d = np.hypot(ys - cy, xs - cx)
        keep = d >= np.percentile(d, 55)  # outer ring of the lung
        ys, xs = ys[keep], xs[keep]
    idx = rng.integers(0, len(ys), size=n)
    return np.stack([ys[idx], xs[idx]], axis=1).astype(np.float64)


def _add_decoys(
    img: np.ndarray, lung: np.ndarray, side: int, rng: np.random.Generator
) -> None:
    """Lesion-like bumps OUTSIDE the lungs, on every class.

    Locally they look exactly like lesions, so telling them apart requires
    spatial context (inside vs outside the lung fields); they are never
    part of the ground-truth lesion mask.
    """
    outside = ~lung
    outside[: side // 8] = False  # keep clear of the top marker band
    n = int(rng.integers(2, 6))
    centers = _sample_in_region(outside, n, rng, peripheral=False)
    dummy = np.zeros_like(lung)
    radii = rng.uniform(0.03, 0.08, size=n) * side
    _place_blobs(img, dummy, outside, centers, radii, rng)


def _render_record(
    label: ClassLabel, severity: float, cfg: SynthConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    side = cfg.side
    img, left, right = _lung_field(cfg, rng)
    if cfg.decoys:
        _add_decoys(img, left | right, side, rng)
    lesion = np.zeros((side, side), dtype=bool)

    if label is not ClassLabel.Control and severity > 0:
        budget_px = _AREA_BUDGET[label] * severity * side * side
        if label is ClassLabel.NonCovidPneumonia:
            # focal cluster in one lung, anchored away from the lung border
            # so the cluster is not clipped into invisibility
            region = left if rng.random() < 0.5 else right
            n = int(rng.integers(2, 5))
            blob_r = math.sqrt(budget_px / n / math.pi)
            anchor = _sample_in_region(region, 1, rng, peripheral=False, margin=blob_r)[0]
            jitter = rng.normal(0, 0.04 * side, size=(n, 2))
            centers = np.clip(anchor + jitter, 0, side - 1)
            _place_blobs(img, lesion, region, centers, np.full(n, blob_r), rng)
        else:
            # diffuse peripheral blobs in both lungs
            n_per = int(rng.integers(3, 7))
            for region in (left, right):
                blob_r = math.sqrt(budget_px / (2 * n_per) / math.pi)
                centers = _sample_in_region(
                    region, n_per, rng, peripheral=True, margin=blob_r / 2
                )
                _place_blobs(img, lesion, region, centers, np.full(n_per, blob_r), rng)

    np.clip(img, 0.0, 1.0, out=img)
    return img, lesion


def clinical_for(
    label: ClassLabel, severity: float, rng: np.random.Generator
) -> ClinicalRecord:
    bilaterality = BILATERALITY.get(label, 0.0)
    rale = int(round(RALE_MAX * severity * bilaterality))
    spo2 = float(np.clip(98.0 - 20.0 * severity + rng.normal(0, 1.5), 70.0, 100.0))
    wbc = None
    if rng.random() > 0.1:  # occasionally absent, like real EHR pulls
        wbc = float(np.clip(rng.normal(7.5 + 4.0 * severity, 1.5), 2.0, 25.0))
    return ClinicalRecord(
        age=float(np.clip(rng.normal(58.0, 12.0), 18.0, 95.0)),
        sex="M" if rng.random() < 0.5 else "F",
        rale=rale,
        spo2=round(spo2, 1),
        wbc=None if wbc is None else round(wbc, 1),
        icu=bool(severity > 0.6),
    )


def generate_dataset(cfg: SynthConfig) -> tuple[DatasetManifest, list[SynthRecord]]:
    """Render the configured number of records per class.

    Output is bit-identical for equal configs: every record draws from its
    own generator spawned off cfg.seed.
    """
    labels: list[ClassLabel] = []
    for label, count in zip(
        (ClassLabel.Control, ClassLabel.NonCovidPneumonia, ClassLabel.Covid19),
        cfg.per_class_counts,
    ):
        labels.extend([label] * count)

    children = np.random.SeedSequence(cfg.seed).spawn(len(labels))
    records: list[SynthRecord] = []
    images: list[ImageRecord] = []
    lo, hi = cfg.severity_range
    for i, (label, seq) in enumerate(zip(labels, children)):
        rng = np.random.default_rng(seq)
        severity = 0.0 if label is ClassLabel.Control else float(rng.uniform(lo, hi))
        site = cfg.sites[int(rng.integers(0, len(cfg.sites)))] if cfg.sites else ""
        img, lesion = _render_record(label, severity, cfg, rng)
        if cfg.site_brightness and cfg.sites:
            offset = cfg.site_brightness * cfg.sites.index(site)
            img = np.clip(img + offset, 0.0, 1.0)
        clinical = clinical_for(label, severity, rng)
        rid = f"synth-{i:05d}"
        records.append(
            SynthRecord(
                image=ImageBuffer(img),
                label=label,
                lesion_mask=lesion,
                severity=severity,
                clinical=clinical,
                record_id=rid,
                site=site,
            )
        )
        images.append(
            ImageRecord(
                id=rid,
                path=f"images/{rid}.png",
                label=label,
                split="train",
                site=site,
                clinical=clinical,
            )
        )
    return DatasetManifest(images=images), records


def export(records: list[SynthRecord], out_dir: str | Path) -> Path:
    """Write images, lesion masks and the manifest under out_dir.

    Returns the manifest path; the manifest loads back via load_manifest.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
        images = []
        for rec in records:
            img8 = np.round(np.clip(rec.image.pixels, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(img8, mode="L").save(out_dir / "images" / f"{rec.record_id}.png")
            mask8 = (rec.lesion_mask.astype(np.uint8)) * 255
            Image.fromarray(mask8, mode="L").save(out_dir / "masks" / f"{rec.record_id}.png")
            images.append(
                ImageRecord(
                    id=rec.record_id,
                    path=f"images/{rec.record_id}.png",
                    label=rec.label,
                    split="train",
                    site=rec.site,
                    clinical=rec.clinical,
                )
            )
        manifest = DatasetManifest(images=images)
        return save_manifest(manifest, out_dir / "manifest.json")
    except OSError as exc:
        raise IoError(f"cannot export dataset to {out_dir}: {exc}") from None


def load_lesion_mask(dataset_dir: str | Path, record_id: str) -> np.ndarray:
    """Read back a ground-truth lesion mask as a boolean array."""
    path = Path(dataset_dir) / "masks" / f"{record_id}.png"
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127
