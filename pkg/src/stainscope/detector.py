"""Hue-loss anomaly scoring of patches and whole slides.

The detector compares how much brown a patch contains before and after
autoencoder reconstruction.  A model trained only on healthy tissue does
not learn to reproduce anomalous brown precipitate, so a score well above 1
marks the reconstruction as having "lost" brown pixels.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import EmptySlideError, InvalidInputError
from .imaging import (
    count_hue_band,
    extract_border_patches,
    morphological_gradient,
    rgb_to_hsv,
    tissue_mask,
)
from .ae.layers import Autoencoder, batch_to_images, patches_to_batch


@dataclass(frozen=True)
class BrownBand:
    """Closed hue band (degrees, wrapped) with optional sat/val gates.

    ``lo > hi`` after wrapping simply means the band spans the 0/360 seam;
    every (lo, hi) pair denotes a nonempty closed interval on the circle.
    """

    lo: float = -20.0
    hi: float = 20.0
    sat_min: float = 0.0
    val_min: float = 0.0


BROWN_BAND = BrownBand()


@dataclass
class PatchScore:
    patch_id: str
    n_orig: int
    n_rec: int
    f_brown: float
    positive: bool | None = None
    origin: tuple[int, int] | None = None


@dataclass
class Thresholds:
    """Calibrated operating thresholds plus the AUCs they were fit at."""

    t_patch: float
    t_slide: float
    patch_auc: float | None = None
    slide_auc: float | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "t_patch": self.t_patch,
                "t_slide": self.t_slide,
                "patch_auc": self.patch_auc,
                "slide_auc": self.slide_auc,
            },
            sort_keys=True,
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "Thresholds":
        try:
            raw = json.loads(text)
            return cls(
                t_patch=float(raw["t_patch"]),
                t_slide=float(raw["t_slide"]),
                patch_auc=raw.get("patch_auc"),
                slide_auc=raw.get("slide_auc"),
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise InvalidInputError(f"bad thresholds file: {exc}") from exc


@dataclass
class SlideScore:
    slide_id: str
    patch_scores: list[PatchScore]
    positive_fraction: float  # percent in [0, 100]
    diagnosis: str  # positive / negative / indeterminate
    t_patch: float
    t_slide: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "slide_id": self.slide_id,
                "thresholds": {"t_patch": self.t_patch, "t_slide": self.t_slide},
                "positive_fraction": self.positive_fraction,
                "diagnosis": self.diagnosis,
                "patches": [
                    {
                        "patch_id": p.patch_id,
                        "origin": list(p.origin) if p.origin is not None else None,
                        "f_brown": p.f_brown,
                        "positive": p.positive,
                    }
                    for p in self.patch_scores
                ],
            },
            sort_keys=True,
            indent=2,
        )


def brown_count(img: np.ndarray, band: BrownBand = BROWN_BAND) -> int:
    """Number of pixels of a uint8 RGB image inside the brown band."""
    return count_hue_band(rgb_to_hsv(img), band.lo, band.hi, band.sat_min, band.val_min)


def f_brown(
    original: np.ndarray,
    reconstruction: np.ndarray,
    band: BrownBand = BROWN_BAND,
    epsilon: float = 1.0,
    patch_id: str = "",
    origin: tuple[int, int] | None = None,
) -> PatchScore:
    """Smoothed ratio of brown pixels before and after reconstruction.

    ``(n_orig + epsilon) / (n_rec + epsilon)``; a value above 1 means the
    reconstruction lost brown pixels relative to the original.
    """
    original = np.asarray(original)
    reconstruction = np.asarray(reconstruction)
    if original.shape != reconstruction.shape:
        raise InvalidInputError(
            f"shape mismatch: original {original.shape} vs reconstruction {reconstruction.shape}"
        )
    if epsilon <= 0:
        raise InvalidInputError("epsilon must be positive")
    n_orig = brown_count(original, band)
    n_rec = brown_count(reconstruction, band)
    return PatchScore(
        patch_id=patch_id,
        n_orig=n_orig,
        n_rec=n_rec,
        f_brown=(n_orig + epsilon) / (n_rec + epsilon),
        origin=origin,
    )


def classify_patch(score: PatchScore, t_patch: float) -> bool:
    """Positive iff the score reaches the patch threshold (inclusive)."""
    return score.f_brown >= t_patch


def slide_probability(scores: list[PatchScore], t_patch: float) -> float:
    """Percentage of positive patches; also fills the ``positive`` flags."""
    if not scores:
        raise EmptySlideError("no patches to aggregate")
    for s in scores:
        s.positive = classify_patch(s, t_patch)
    return 100.0 * sum(1 for s in scores if s.positive) / len(scores)


def baseline_red_fraction(patch_img: np.ndarray, band: BrownBand = BROWN_BAND) -> float:
    """Comparison detector: plain fraction of brown pixels, no reconstruction."""
    img = np.asarray(patch_img)
    return brown_count(img, band) / (img.shape[0] * img.shape[1])


def score_patches(
    model: Autoencoder,
    patches,
    band: BrownBand = BROWN_BAND,
    epsilon: float = 1.0,
    batch_size: int = 8,
    jobs: int = 1,
) -> list[PatchScore]:
    """Reconstruct and score a list of :class:`~stainscope.imaging.Patch`.

    Batches are processed independently (optionally by a thread pool) and
    collected in patch order, so the result does not depend on ``jobs``.
    """
    patches = list(patches)
    if not patches:
        return []
    chunks = [patches[i : i + batch_size] for i in range(0, len(patches), batch_size)]

    def run(chunk):
        batch = patches_to_batch([p.image for p in chunk])
        rec = batch_to_images(model.forward(batch, training=False))
        return [
            f_brown(p.image, rec[j], band, epsilon, patch_id=p.patch_id, origin=p.origin)
            for j, p in enumerate(chunk)
        ]

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return [s for part in parts for s in part]


def score_slide(
    img: np.ndarray,
    model: Autoencoder,
    thresholds: Thresholds,
    slide_id: str = "slide",
    band: BrownBand = BROWN_BAND,
    epsilon: float = 1.0,
    stride: int = 128,
    se_radius: int = 1,
    min_tissue_area: int = 64,
    batch_size: int = 8,
    jobs: int = 1,
) -> SlideScore:
    """Full slide pipeline: segment, crop the tissue border, score, aggregate.

    Raises :class:`EmptySlideError` when no tissue (or no border) is found;
    the caller decides how to surface the indeterminate diagnosis.
    """
    mask = tissue_mask(img, min_area=min_tissue_area)
    if not mask.any():
        raise EmptySlideError(f"slide {slide_id!r}: no tissue found")
    border = morphological_gradient(mask, se_radius=se_radius)
    patches = extract_border_patches(img, border, slide_id, stride=stride)
    scores = score_patches(model, patches, band, epsilon, batch_size, jobs)
    fraction = slide_probability(scores, thresholds.t_patch)
    diagnosis = "positive" if fraction >= thresholds.t_slide else "negative"
    return SlideScore(
        slide_id=slide_id,
        patch_scores=scores,
        positive_fraction=fraction,
        diagnosis=diagnosis,
        t_patch=thresholds.t_patch,
        t_slide=thresholds.t_slide,
    )
