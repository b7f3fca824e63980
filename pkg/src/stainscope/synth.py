"""Synthetic slide generator with pixel-exact ground truth.

Everything is built in HSV and quantized once, which is what makes the class
guarantees provable: healthy tissue hue is clamped to a bluish range and the
near-white background keeps a strict R < G < B channel ordering, so neither
can land inside the brown detection band even after uint8 rounding.  Blob hue
is clamped inside the band with enough chroma that rounding cannot push it
out.  All randomness flows from a single seed per artifact.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi

from .errors import DataError, InvalidInputError, PlacementError
from .imaging import (
    PATCH_SIZE,
    Patch,
    extract_border_patches,
    hsv_to_rgb,
    morphological_gradient,
    patch_filename,
    save_image,
    tissue_mask,
)
from .manifest import Manifest, PatchRecord, SlideRecord

DENSITY_CLASSES = ("negative", "low", "high")


@dataclass(frozen=True)
class SynthSpec:
    """Tunables of the generator.  Defaults define the 50-slide study set."""

    seed: int = 42
    n_negative: int = 20
    n_low: int = 15
    n_high: int = 15
    train_fraction: float = 0.3
    # per-patch blob counts for the standalone patch generator
    blobs_per_patch_low: tuple[int, int] = (1, 3)
    blobs_per_patch_high: tuple[int, int] = (8, 20)
    # per-tissue-region blob counts used when composing slides
    blobs_per_region_low: tuple[int, int] = (3, 6)
    blobs_per_region_high: tuple[int, int] = (30, 60)
    tissue_hue_range: tuple[float, float] = (210.0, 260.0)
    blob_hue_range: tuple[float, float] = (-15.0, 15.0)
    noise_sigma: float = 8.0  # 8-bit levels
    blob_radius: tuple[float, float] = (2.0, 8.0)
    slide_size: int = 2048
    border_band: int = 16  # blob placement depth inside the region border
    stride: int = 128  # patch tiling stride for ground-truth labels

    def __post_init__(self):
        if self.n_negative < 0 or self.n_low < 0 or self.n_high < 0:
            raise InvalidInputError("slide counts must be >= 0")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise InvalidInputError("train_fraction must be in [0, 1]")
        lo, hi = self.blob_radius
        if not 1.0 <= lo <= hi:
            raise InvalidInputError("blob_radius must satisfy 1 <= lo <= hi")
        if self.slide_size < PATCH_SIZE:
            raise InvalidInputError(f"slide_size must be >= {PATCH_SIZE}")
        for name in ("blobs_per_patch_low", "blobs_per_patch_high",
                     "blobs_per_region_low", "blobs_per_region_high"):
            a, b = getattr(self, name)
            if not 1 <= a <= b:
                raise InvalidInputError(f"{name} must satisfy 1 <= lo <= hi")


DEFAULT_SPEC = SynthSpec()


@dataclass
class SlideTruth:
    """Ground truth emitted alongside a synthetic slide."""

    diagnosis: str  # positive / negative
    density: str  # negative / low / high
    blob_centers: list[tuple[int, int]]  # (x, y)
    blob_mask: np.ndarray = field(repr=False)  # bool, slide-shaped
    patches: list[Patch] = field(repr=False, default_factory=list)
    patch_labels: dict[str, str] = field(default_factory=dict)


def _smooth_field(rng, shape, cell, lo, hi):
    """Band-limited noise: coarse uniform grid, bilinear upsample, rescale."""
    ch = shape[0] // cell + 2
    cw = shape[1] // cell + 2
    coarse = rng.uniform(0.0, 1.0, (ch, cw))
    f = ndi.zoom(coarse, cell, order=1)[: shape[0], : shape[1]]
    return lo + (hi - lo) * f


def _tissue_hsv(rng, shape, spec: SynthSpec):
    """Smooth bluish HSV texture with per-pixel noise, clamped band-safe."""
    hue_lo, hue_hi = spec.tissue_hue_range
    sig = spec.noise_sigma / 255.0
    h = _smooth_field(rng, shape, 32, hue_lo + 5.0, hue_hi - 5.0)
    h = h + rng.normal(0.0, 2.0, shape)
    h = np.clip(h, hue_lo - 5.0, hue_hi + 5.0)
    s = _smooth_field(rng, shape, 48, 0.42, 0.72) + rng.normal(0.0, 0.5 * sig, shape)
    s = np.clip(s, 0.35, 0.80)
    v = _smooth_field(rng, shape, 48, 0.38, 0.68) + rng.normal(0.0, sig, shape)
    v = np.clip(v, 0.30, 0.75)
    return np.stack([h, s, v], axis=-1)


def _blob_hsv(rng, n, spec: SynthSpec):
    """HSV values for one blob's support pixels (high-chroma brown)."""
    lo, hi = spec.blob_hue_range
    h = rng.uniform(lo + 3.0, hi - 3.0) + rng.normal(0.0, 1.5, n)
    h = np.clip(h, lo + 1.0, hi - 1.0)
    s = np.clip(rng.uniform(0.78, 0.90) + rng.normal(0.0, 0.02, n), 0.72, 0.95)
    v = np.clip(rng.uniform(0.40, 0.60) + rng.normal(0.0, 0.03, n), 0.33, 0.70)
    return h, s, v


def _ellipse_support(rng, spec: SynthSpec):
    """Random rotated ellipse as (dy, dx) offsets from its center."""
    a, b = rng.uniform(spec.blob_radius[0], spec.blob_radius[1], 2)
    theta = rng.uniform(0.0, math.pi)
    r = int(math.ceil(max(a, b)))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    ct, st = math.cos(theta), math.sin(theta)
    u = ct * xx + st * yy
    w = -st * xx + ct * yy
    inside = (u / a) ** 2 + (w / b) ** 2 <= 1.0
    dy, dx = np.nonzero(inside)
    return dy - r, dx - r


def _paint_blob(rng, hsv, support_yx, spec: SynthSpec):
    ys, xs = support_yx
    h, s, v = _blob_hsv(rng, ys.size, spec)
    hsv[ys, xs, 0] = h
    hsv[ys, xs, 1] = s
    hsv[ys, xs, 2] = v


def gen_healthy_patch(seed, spec: SynthSpec = DEFAULT_SPEC) -> Patch:
    """256x256 bluish tissue patch with zero brown-band pixels."""
    rng = np.random.default_rng(seed)
    hsv = _tissue_hsv(rng, (PATCH_SIZE, PATCH_SIZE), spec)
    img = hsv_to_rgb(hsv)
    half = PATCH_SIZE // 2
    return Patch(slide_id=f"healthy_{seed}", origin=(0, 0), center=(half, half), image=img)


def gen_infected_patch(
    seed, n_blobs: int, spec: SynthSpec = DEFAULT_SPEC
) -> tuple[Patch, np.ndarray]:
    """Healthy base plus ``n_blobs`` disjoint brown ellipses; returns the mask."""
    if n_blobs < 1:
        raise InvalidInputError("n_blobs must be >= 1")
    rng = np.random.default_rng(seed)
    hsv = _tissue_hsv(rng, (PATCH_SIZE, PATCH_SIZE), spec)
    occupied = np.zeros((PATCH_SIZE, PATCH_SIZE), dtype=bool)
    r_max = int(math.ceil(spec.blob_radius[1]))
    for i in range(n_blobs):
        for _ in range(100):
            dy, dx = _ellipse_support(rng, spec)
            cy, cx = rng.integers(r_max, PATCH_SIZE - r_max, 2)
            ys, xs = dy + cy, dx + cx
            if not occupied[ys, xs].any():
                occupied[ys, xs] = True
                _paint_blob(rng, hsv, (ys, xs), spec)
                break
        else:
            raise PlacementError(
                f"could not place blob {i + 1}/{n_blobs} without overlap"
            )
    img = hsv_to_rgb(hsv)
    half = PATCH_SIZE // 2
    patch = Patch(
        slide_id=f"infected_{seed}", origin=(0, 0), center=(half, half), image=img
    )
    return patch, occupied


# Tissue regions are anchored near quadrant centers with bounded jitter and
# bounded radius (all proportional to the slide size), so 1-3 regions always
# fit without touching: worst-case radii sum 2*0.161*s*1.32 < minimum anchor
# distance 0.5*s - 2*0.029*s.
_ANCHOR_FRACS = ((0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75))
_REGION_RADIUS_FRAC = (0.107, 0.161)
_REGION_JITTER_FRAC = 0.029


def _region_mask(rng, size: int, anchor_xy) -> np.ndarray:
    """One irregular star-convex region: radius modulated by low harmonics."""
    jitter = max(1, int(size * _REGION_JITTER_FRAC))
    cx = anchor_xy[0] + int(rng.integers(-jitter, jitter + 1))
    cy = anchor_xy[1] + int(rng.integers(-jitter, jitter + 1))
    base = rng.uniform(size * _REGION_RADIUS_FRAC[0], size * _REGION_RADIUS_FRAC[1])
    amps = rng.uniform(0.03, 0.08, 4)  # harmonics k=2..5, sum <= 0.32
    phases = rng.uniform(0.0, 2.0 * math.pi, 4)
    r_lim = int(math.ceil(base * 1.4)) + 1
    y0, y1 = max(cy - r_lim, 0), min(cy + r_lim + 1, size)
    x0, x1 = max(cx - r_lim, 0), min(cx + r_lim + 1, size)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy, dx = yy - cy, xx - cx
    theta = np.arctan2(dy, dx)
    r_edge = np.full(theta.shape, base)
    for k, (a, p) in enumerate(zip(amps, phases), start=2):
        r_edge = r_edge + base * a * np.sin(k * theta + p)
    inside = dy * dy + dx * dx <= r_edge * r_edge
    mask = np.zeros((size, size), dtype=bool)
    mask[y0:y1, x0:x1] = inside
    return mask


def _background(rng, size: int) -> np.ndarray:
    """Near-white background with strict R < G < B so hue stays bluish."""
    w = rng.integers(236, 244, (size, size), dtype=np.int16)
    jit = rng.integers(-1, 2, (3, size, size), dtype=np.int16)
    img = np.stack([w + jit[0], w + 3 + jit[1], w + 6 + jit[2]], axis=-1)
    return img.astype(np.uint8)


def gen_synthetic_slide(
    seed, density: str, spec: SynthSpec = DEFAULT_SPEC, slide_id: str | None = None
) -> tuple[np.ndarray, SlideTruth]:
    """Compose one slide: background, 1-3 tissue regions, border blobs.

    Ground truth carries blob centers, the exact blob support mask, and the
    border patches with labels (positive iff the patch window intersects at
    least one blob pixel).
    """
    if density not in DENSITY_CLASSES:
        raise InvalidInputError(f"unknown density class {density!r}")
    rng = np.random.default_rng(seed)
    size = spec.slide_size
    n_regions = int(rng.integers(1, 4))
    anchors = [
        (int(f[0] * size), int(f[1] * size))
        for f in _ANCHOR_FRACS
    ]
    picked = rng.choice(len(anchors), size=n_regions, replace=False)
    regions = [_region_mask(rng, size, anchors[i]) for i in picked]
    tissue = np.logical_or.reduce(regions)

    hsv = _tissue_hsv(rng, (size, size), spec)
    blob_mask = np.zeros((size, size), dtype=bool)
    centers: list[tuple[int, int]] = []
    if density != "negative":
        lo, hi = (
            spec.blobs_per_region_low
            if density == "low"
            else spec.blobs_per_region_high
        )
        for region in regions:
            depth = ndi.distance_transform_cdt(region, metric="chessboard")
            band_ys, band_xs = np.nonzero((depth >= 1) & (depth <= spec.border_band))
            n_blobs = int(rng.integers(lo, hi + 1))
            n_blobs = min(n_blobs, band_ys.size)
            pick = rng.choice(band_ys.size, size=n_blobs, replace=False)
            for j in pick:
                cy, cx = int(band_ys[j]), int(band_xs[j])
                dy, dx = _ellipse_support(rng, spec)
                ys = np.clip(dy + cy, 0, size - 1)
                xs = np.clip(dx + cx, 0, size - 1)
                keep = region[ys, xs]  # blobs live on tissue only
                ys, xs = ys[keep], xs[keep]
                _paint_blob(rng, hsv, (ys, xs), spec)
                blob_mask[ys, xs] = True
                centers.append((cx, cy))

    img = _background(rng, size)
    tissue_rgb = hsv_to_rgb(hsv)
    img[tissue] = tissue_rgb[tissue]

    if slide_id is None:
        slide_id = f"synth_{density}_{seed}"
    mask = tissue_mask(img)
    border = morphological_gradient(mask)
    patches = extract_border_patches(img, border, slide_id, stride=spec.stride)
    labels = {}
    for p in patches:
        ox, oy = p.origin
        window = blob_mask[oy : oy + PATCH_SIZE, ox : ox + PATCH_SIZE]
        labels[p.patch_id] = "positive" if window.any() else "negative"
    truth = SlideTruth(
        diagnosis="negative" if density == "negative" else "positive",
        density=density,
        blob_centers=centers,
        blob_mask=blob_mask,
        patches=patches,
        patch_labels=labels,
    )
    return img, truth


def _save(path, img) -> None:
    try:
        save_image(path, img)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def gen_dataset(spec: SynthSpec, out_dir) -> Manifest:
    """Write slides, border-patch crops and a manifest under ``out_dir``.

    Per class, the first ``round(train_fraction * n)`` slides go to the train
    split and the rest to test.  Each slide draws its generator from a child
    seed of ``spec.seed``, so regeneration is byte-identical and slides could
    be produced in any order (or in parallel) without changing the output.
    """
    log = logging.getLogger("stainscope.synth")
    out = Path(out_dir)
    try:
        (out / "slides").mkdir(parents=True, exist_ok=True)
        (out / "patches").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from exc

    classes = (
        ("neg", "negative", spec.n_negative),
        ("low", "low", spec.n_low),
        ("high", "high", spec.n_high),
    )
    slides = []
    for ci, (tag, density, count) in enumerate(classes):
        n_train = round(spec.train_fraction * count)
        for i in range(count):
            slide_id = f"{tag}_{i:02d}"
            seed = np.random.SeedSequence([spec.seed, ci, i])
            img, truth = gen_synthetic_slide(seed, density, spec, slide_id=slide_id)
            image_path = f"slides/{slide_id}.png"
            _save(out / image_path, img)
            records = []
            for p in truth.patches:
                rel = f"patches/{patch_filename(p.slide_id, p.origin)}"
                _save(out / rel, p.image)
                records.append(
                    PatchRecord(
                        patch_path=rel,
                        origin=p.origin,
                        label=truth.patch_labels[p.patch_id],
                    )
                )
            slides.append(
                SlideRecord(
                    slide_id=slide_id,
                    image_path=image_path,
                    diagnosis=truth.diagnosis,
                    split="train" if i < n_train else "test",
                    patches=records,
                )
            )
            log.info(
                "slide %s: %d patches, %d blobs", slide_id,
                len(records), len(truth.blob_centers),
            )
    manifest = Manifest(slides=slides)
    manifest.save(out / "manifest.json")
    return manifest
