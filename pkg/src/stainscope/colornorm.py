"""Stain color normalization: MVGD transfer, brightness correction, histogram matching.

The heavy lifting is the linear Monge-Kantorovich map between two Gaussian
color models; brightness correction and classical histogram matching are
offered as follow-up steps.  All public image functions take and return
uint8 RGB; the float-valued core of the MVGD map is exposed separately so
its statistical contract can be verified before quantization.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, NumericError
from .imaging import rgb_to_hsv, tissue_mask

_EIG_TOL = 1e-10


@dataclass
class ChannelStats:
    """Mean and covariance of RGB values scaled to [0, 1]."""

    mean: np.ndarray  # (3,)
    cov: np.ndarray  # (3, 3), population convention

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.mean.shape != (3,) or self.cov.shape != (3, 3):
            raise InvalidInputError("ChannelStats needs a 3-vector mean and 3x3 covariance")


def channel_stats(img: np.ndarray, mask: np.ndarray | None = None) -> ChannelStats:
    """Per-channel mean and population covariance over selected pixels.

    ``mask`` (boolean, same height/width) restricts the pixels; at least two
    must remain.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError(f"expected (H, W, 3) image, got {img.shape}")
    pixels = img.reshape(-1, 3).astype(np.float64) / 255.0
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != img.shape[:2]:
            raise InvalidInputError("mask shape does not match image")
        pixels = pixels[mask.ravel()]
    if pixels.shape[0] < 2:
        raise InvalidInputError("need at least 2 pixels for channel statistics")
    mean = pixels.mean(axis=0)
    centered = pixels - mean
    cov = centered.T @ centered / pixels.shape[0]
    return ChannelStats(mean=mean, cov=cov)


def _sym_sqrt_and_inv_sqrt(m: np.ndarray, what: str):
    vals, vecs = np.linalg.eigh(m)
    if vals.min() <= _EIG_TOL * max(vals.max(), 1.0):
        raise NumericError(f"{what} covariance is not positive definite; increase lambda")
    root = (vecs * np.sqrt(vals)) @ vecs.T
    inv_root = (vecs / np.sqrt(vals)) @ vecs.T
    return root, inv_root


def _sym_sqrt_psd(m: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh(m)
    if vals.min() < -_EIG_TOL * max(vals.max(), 1.0):
        raise NumericError(f"{what} matrix is not positive semi-definite")
    vals = np.maximum(vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def mvgd_map(src: ChannelStats, tgt: ChannelStats, lam: float = 1e-6) -> np.ndarray:
    """The symmetric linear map T with T (Sigma_s + lam I) T = Sigma_t + lam I.

    T = S^(-1/2) (S^(1/2) Sigma_t' S^(1/2))^(1/2) S^(-1/2) with S the
    regularized source covariance; applying ``x -> T (x - mu_s) + mu_t``
    moves the source Gaussian onto the target one (the closed-form optimal
    transport map between Gaussians).
    """
    if lam < 0.0:
        raise InvalidInputError("lambda must be >= 0")
    reg = lam * np.eye(3)
    s_cov = src.cov + reg
    t_cov = tgt.cov + reg
    s_root, s_inv_root = _sym_sqrt_and_inv_sqrt(s_cov, "source")
    inner = _sym_sqrt_psd(s_root @ t_cov @ s_root, "inner transport")
    t = s_inv_root @ inner @ s_inv_root
    return (t + t.T) / 2.0


def mvgd_transform_float(
    pixels: np.ndarray, src: ChannelStats, tgt: ChannelStats, lam: float = 1e-6
) -> np.ndarray:
    """Apply the MVGD map to float pixels in [0, 1]; no clamping, no rounding."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.shape[-1] != 3:
        raise InvalidInputError("pixels must have 3 channels last")
    t = mvgd_map(src, tgt, lam)
    return (pixels - src.mean) @ t.T + tgt.mean


def mvgd_transfer(
    source: np.ndarray, src: ChannelStats, tgt: ChannelStats, lam: float = 1e-6
) -> np.ndarray:
    """Color-transfer a uint8 image; output clamped to [0, 1] and quantized."""
    source = np.asarray(source)
    if source.dtype != np.uint8 or source.ndim != 3 or source.shape[2] != 3:
        raise InvalidInputError("source must be a uint8 (H, W, 3) image")
    out = mvgd_transform_float(source.astype(np.float64) / 255.0, src, tgt, lam)
    return np.round(np.clip(out, 0.0, 1.0) * 255.0).astype(np.uint8)


def hsv_brightness_correction(img: np.ndarray, target_value_mean: float) -> np.ndarray:
    """Scale brightness so the mean HSV value hits the target; hue/sat unchanged.

    The scale ``target / current_mean`` is applied per pixel as an RGB
    multiplication capped at the pixel's own headroom (value cannot exceed
    1), which is exactly a clamped V-channel scaling but avoids a lossy
    round trip through HSV.
    """
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError("img must be a uint8 (H, W, 3) image")
    if not 0.0 < target_value_mean <= 1.0:
        raise InvalidInputError("target_value_mean must lie in (0, 1]")
    value = rgb_to_hsv(img)[..., 2]
    current = float(value.mean())
    if current == 0.0:
        raise InvalidInputError("image is all black; brightness undefined")
    factor = target_value_mean / current
    # Per-pixel cap: scaling by 1/v saturates the value channel at exactly 1.
    with np.errstate(divide="ignore"):
        cap = np.where(value > 0.0, 1.0 / value, np.inf)
    scale = np.minimum(factor, cap)
    out = img.astype(np.float64) * scale[..., None]
    return np.round(np.clip(out, 0.0, 255.0)).astype(np.uint8)


def _match_lut(src_counts: np.ndarray, ref_counts: np.ndarray) -> np.ndarray:
    # m(v) = min{ r : CDF_ref(r) >= CDF_src(v) }, compared by integer
    # cross-multiplication so equality is exact.
    src_cum = np.cumsum(src_counts, dtype=np.int64)
    ref_cum = np.cumsum(ref_counts, dtype=np.int64)
    n_src = int(src_cum[-1])
    n_ref = int(ref_cum[-1])
    lut = np.searchsorted(ref_cum * n_src, src_cum * n_ref, side="left")
    return lut.astype(np.uint8)


def histogram_match(img: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Classical per-channel 8-bit histogram matching.

    The mapping is the monotone discrete quantile function; matching an
    image to itself is the identity and the operation is idempotent.
    """
    img = np.asarray(img)
    reference = np.asarray(reference)
    for name, arr in (("img", img), ("reference", reference)):
        if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 3:
            raise InvalidInputError(f"{name} must be a uint8 (H, W, 3) image")
    out = np.empty_like(img)
    for ch in range(3):
        src_counts = np.bincount(img[..., ch].ravel(), minlength=256)
        ref_counts = np.bincount(reference[..., ch].ravel(), minlength=256)
        lut = _match_lut(src_counts, ref_counts)
        out[..., ch] = lut[img[..., ch]]
    return out


def normalize_staining(
    source: np.ndarray,
    reference: np.ndarray,
    lam: float = 1e-6,
    skip_hist: bool = False,
    use_tissue_mask: bool = True,
) -> np.ndarray:
    """Full normalization pipeline: MVGD, brightness, then histogram matching.

    Channel statistics are fit on tissue pixels (bright background excluded)
    unless ``use_tissue_mask`` is false or a mask comes up empty.
    """
    src_mask = ref_mask = None
    if use_tissue_mask:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            src_mask = tissue_mask(source)
            ref_mask = tissue_mask(reference)
        if not src_mask.any() or not ref_mask.any():
            warnings.warn("tissue mask empty; fitting stats on all pixels", stacklevel=2)
            src_mask = ref_mask = None
    src_stats = channel_stats(source, src_mask)
    ref_stats = channel_stats(reference, ref_mask)
    out = mvgd_transfer(source, src_stats, ref_stats, lam)
    ref_value_mean = float(rgb_to_hsv(reference)[..., 2].mean())
    out = hsv_brightness_correction(out, ref_value_mean)
    if not skip_hist:
        out = histogram_match(out, reference)
    return out
