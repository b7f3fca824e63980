"""Color conversion, tissue segmentation and patch extraction.

All images are ``uint8`` RGB arrays of shape ``(H, W, 3)``.  HSV arrays are
``float64`` with hue in degrees ``[0, 360)`` and saturation/value in
``[0, 1]``; achromatic pixels get hue 0 by convention.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage as ndi

from .errors import EmptyBorderError, InvalidInputError

PATCH_SIZE = 256

# Rec. 601 luma weights, the same convention PIL uses for mode "L".
_LUMA = (0.299, 0.587, 0.114)


def _as_rgb(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError(f"expected (H, W, 3) RGB array, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise InvalidInputError(f"expected uint8 image, got dtype {img.dtype}")
    return img


def rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    """Convert a uint8 RGB image to hexcone HSV.

    Parameters
    ----------
    img : ndarray
        ``(H, W, 3)`` uint8 RGB image.

    Returns
    -------
    ndarray
        ``(H, W, 3)`` float64 array with channels (hue, sat, val); hue is in
        degrees ``[0, 360)``, saturation and value in ``[0, 1]``.  Pixels with
        zero chroma have hue 0, pixels with zero value have saturation 0.
    """
    img = _as_rgb(img)
    # Hue is computed on the raw integer-valued channels (exact in float64)
    # with a single division, so pixels sitting exactly on a rational band
    # boundary like 3*|g-b| == chroma get an exact hue.
    rgb = img.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    # Avoid 0/0 without branching; the numerator is forced to 0 there anyway.
    c_safe = np.where(c == 0.0, 1.0, c)
    v_safe = np.where(v == 0.0, 1.0, v)

    h_r = 60.0 * (g - b) / c_safe
    h_r = np.where(h_r < 0.0, h_r + 360.0, h_r)
    h_g = 60.0 * (b - r) / c_safe + 120.0
    h_b = 60.0 * (r - g) / c_safe + 240.0
    # Tie order (max == r wins, then g) mirrors colorsys.
    h = np.select([c == 0.0, r == v, g == v], [0.0, h_r, h_g], default=h_b)

    s = np.where(v == 0.0, 0.0, c / v_safe)
    return np.stack([h, s, v / 255.0], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Invert :func:`rgb_to_hsv`, rounding back to uint8.

    Hue may be any finite value in degrees (it is wrapped modulo 360);
    saturation and value must lie in ``[0, 1]``.
    """
    hsv = np.asarray(hsv, dtype=np.float64)
    if hsv.ndim < 1 or hsv.shape[-1] != 3:
        raise InvalidInputError(f"expected (..., 3) HSV array, got shape {hsv.shape}")
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    if np.any((s < 0.0) | (s > 1.0)) or np.any((v < 0.0) | (v > 1.0)):
        raise InvalidInputError("saturation and value must lie in [0, 1]")

    hp = (h % 360.0) / 60.0
    sextant = np.minimum(np.floor(hp).astype(np.int64), 5)
    f = hp - sextant
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))

    r = np.choose(sextant, [v, q, p, p, t, v])
    g = np.choose(sextant, [t, v, v, q, p, p])
    b = np.choose(sextant, [p, p, t, v, v, q])
    rgb = np.stack([r, g, b], axis=-1)
    return np.round(rgb * 255.0).astype(np.uint8)


def count_hue_band(
    hsv: np.ndarray,
    lo: float,
    hi: float,
    sat_min: float = 0.0,
    val_min: float = 0.0,
) -> int:
    """Count pixels whose hue falls in the closed band ``[lo, hi]``.

    The band is interpreted on the hue circle: endpoints are wrapped into
    ``[0, 360)`` and a band whose wrapped low end exceeds its high end spans
    the 0/360 seam (so ``(-20, 20)`` means ``h >= 340 or h <= 20``).  A band
    covering 360 degrees or more matches every hue.  Pixels must additionally
    satisfy ``sat >= sat_min`` and ``val >= val_min``.
    """
    hsv = np.asarray(hsv)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    if hi - lo >= 360.0:
        in_band = np.ones(h.shape, dtype=bool)
    else:
        lo_w, hi_w = lo % 360.0, hi % 360.0
        if lo_w <= hi_w:
            in_band = (h >= lo_w) & (h <= hi_w)
        else:
            in_band = (h >= lo_w) | (h <= hi_w)
    return int(np.count_nonzero(in_band & (s >= sat_min) & (v >= val_min)))


def grayscale(img: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an RGB image as float64 in ``[0, 255]``."""
    img = _as_rgb(img)
    w = np.asarray(_LUMA, dtype=np.float64)
    return img.astype(np.float64) @ w


def otsu_threshold(gray: np.ndarray) -> float:
    """Otsu's threshold of a grayscale image in ``[0, 255]``.

    Maximizes the between-class variance over 256 integer bin splits and
    returns the bin edge ``t`` such that ``gray <= t`` is the lower class.
    Raises :class:`InvalidInputError` if the image has a single gray level.
    """
    gray = np.asarray(gray, dtype=np.float64)
    levels = np.clip(np.round(gray), 0, 255).astype(np.int64)
    if levels.min() == levels.max():
        raise InvalidInputError("cannot threshold a uniform image")
    counts = np.bincount(levels.ravel(), minlength=256).astype(np.float64)
    total = counts.sum()
    omega0 = np.cumsum(counts) / total
    mu_t = np.cumsum(counts * np.arange(256)) / total
    omega1 = 1.0 - omega0
    # sigma_b^2 = (mu_T*omega0 - mu)^2 / (omega0*omega1); undefined splits -> -inf
    num = (mu_t[-1] * omega0 - mu_t) ** 2
    den = omega0 * omega1
    sigma_b = np.where(den > 0.0, num / np.where(den > 0.0, den, 1.0), -np.inf)
    return float(np.argmax(sigma_b[:-1]))


def tissue_mask(img: np.ndarray, min_area: int = 64) -> np.ndarray:
    """Segment tissue from the bright background of a slide image.

    Tissue is the class *below* the Otsu threshold of the luma image.  The raw
    mask is cleaned with a 3x3 binary opening, then connected components
    (4-connectivity) smaller than ``min_area`` pixels are dropped.

    Returns an all-false mask (with a warning) when the image is uniform or
    when nothing survives cleanup.
    """
    img = _as_rgb(img)
    levels = np.round(grayscale(img))
    try:
        thresh = otsu_threshold(levels)
    except InvalidInputError:
        warnings.warn("uniform image: no tissue found", stacklevel=2)
        return np.zeros(img.shape[:2], dtype=bool)
    mask = levels <= thresh

    square = np.ones((3, 3), dtype=bool)
    mask = ndi.binary_opening(mask, structure=square)
    labels, n = ndi.label(mask)
    if n:
        sizes = np.bincount(labels.ravel())
        sizes[0] = 0
        mask = sizes[labels] >= min_area
    if not mask.any():
        warnings.warn("no tissue found after cleanup", stacklevel=2)
    return mask


def morphological_gradient(mask: np.ndarray, se_radius: int = 1) -> np.ndarray:
    """Border of a binary mask: dilation minus erosion with a square element.

    The structuring element is a ``(2*se_radius+1)`` square.  Outside the
    image the mask is treated as edge-replicated, which is what
    ``border_value=0`` for the dilation and ``border_value=1`` for the
    erosion compute on a clipped neighborhood.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise InvalidInputError(f"expected 2-d mask, got shape {mask.shape}")
    if se_radius < 1:
        raise InvalidInputError("se_radius must be >= 1")
    square = np.ones((2 * se_radius + 1,) * 2, dtype=bool)
    dil = ndi.binary_dilation(mask, structure=square, border_value=0)
    ero = ndi.binary_erosion(mask, structure=square, border_value=1)
    return dil & ~ero


@dataclass
class Patch:
    """A fixed-size crop of a slide together with where it came from."""

    slide_id: str
    origin: tuple[int, int]  # (x, y) of the top-left corner in the slide
    center: tuple[int, int]  # (x, y) of the border pixel that generated it
    image: np.ndarray = field(repr=False)

    @property
    def patch_id(self) -> str:
        ox, oy = self.origin
        return f"{self.slide_id}_x{ox}_y{oy}"


def patch_filename(slide_id: str, origin: tuple[int, int]) -> str:
    ox, oy = origin
    return f"{slide_id}_x{ox}_y{oy}.png"


_PATCH_NAME = re.compile(r"^(?P<slide>.+)_x(?P<x>\d+)_y(?P<y>\d+)\.png$")


def parse_patch_filename(name: str) -> tuple[str, tuple[int, int]]:
    """Recover ``(slide_id, origin)`` from a patch file name."""
    m = _PATCH_NAME.match(name)
    if m is None:
        raise InvalidInputError(f"not a patch file name: {name!r}")
    return m.group("slide"), (int(m.group("x")), int(m.group("y")))


def _clamped_origin(center: tuple[int, int], shape: tuple[int, int]) -> tuple[int, int]:
    cx, cy = center
    h, w = shape
    ox = min(max(cx - PATCH_SIZE // 2, 0), w - PATCH_SIZE)
    oy = min(max(cy - PATCH_SIZE // 2, 0), h - PATCH_SIZE)
    return ox, oy


def _crop(img: np.ndarray, slide_id: str, center: tuple[int, int]) -> Patch:
    ox, oy = _clamped_origin(center, img.shape[:2])
    tile = np.ascontiguousarray(img[oy : oy + PATCH_SIZE, ox : ox + PATCH_SIZE])
    return Patch(slide_id=slide_id, origin=(ox, oy), center=center, image=tile)


def _require_croppable(img: np.ndarray) -> np.ndarray:
    img = _as_rgb(img)
    h, w = img.shape[:2]
    if h < PATCH_SIZE or w < PATCH_SIZE:
        raise InvalidInputError(f"image {w}x{h} is smaller than a {PATCH_SIZE} patch")
    return img


def extract_border_patches(
    img: np.ndarray,
    border: np.ndarray,
    slide_id: str,
    stride: int = 128,
) -> list[Patch]:
    """Tile the tissue border with patches at least ``stride`` apart.

    Border pixels are visited in row-major order; a pixel becomes a patch
    center when its Chebyshev distance to every previously accepted center is
    at least ``stride``.  Patch origins are the centers shifted by half a
    patch and clamped to the image, so patches near the edge stay in bounds.
    """
    img = _require_croppable(img)
    border = np.asarray(border, dtype=bool)
    if border.shape != img.shape[:2]:
        raise InvalidInputError("border mask shape does not match image")
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    ys, xs = np.nonzero(border)
    if ys.size == 0:
        raise EmptyBorderError(f"slide {slide_id!r}: border mask is empty")

    kept: list[tuple[int, int]] = []
    kept_arr = np.empty((0, 2), dtype=np.int64)
    for y, x in zip(ys.tolist(), xs.tolist()):
        if kept_arr.size:
            cheb = np.abs(kept_arr - (y, x)).max(axis=1)
            if cheb.min() < stride:
                continue
        kept.append((x, y))
        kept_arr = np.concatenate([kept_arr, [[y, x]]])
    patches = []
    seen_origins = set()  # clamping near corners can alias two centers
    for c in kept:
        p = _crop(img, slide_id, c)
        if p.origin not in seen_origins:
            seen_origins.add(p.origin)
            patches.append(p)
    return patches


def random_border_crops(
    img: np.ndarray,
    border: np.ndarray,
    slide_id: str,
    n: int,
    rng: np.random.Generator,
) -> list[Patch]:
    """Sample ``n`` patches centered on border pixels drawn with replacement."""
    img = _require_croppable(img)
    border = np.asarray(border, dtype=bool)
    if border.shape != img.shape[:2]:
        raise InvalidInputError("border mask shape does not match image")
    ys, xs = np.nonzero(border)
    if ys.size == 0:
        raise EmptyBorderError(f"slide {slide_id!r}: border mask is empty")
    idx = rng.integers(0, ys.size, size=n)
    return [_crop(img, slide_id, (int(xs[i]), int(ys[i]))) for i in idx]


def load_image(path) -> np.ndarray:
    """Read an image file as a uint8 RGB array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_image(path, img: np.ndarray) -> None:
    """Write a uint8 RGB array as a PNG file."""
    Image.fromarray(_as_rgb(img), mode="RGB").save(path, format="PNG")
