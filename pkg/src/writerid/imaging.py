"""Document image loading, binarization, contours and patch sampling.

Conventions used throughout the package: a grayscale document is a
``(H, W)`` uint8 array (0 = black), an ink mask is a ``(H, W)`` bool
array with True on ink. Handwriting is assumed dark-on-light, so ink is
``intensity <= threshold``; pass ``invert=True`` for light-on-dark
sources.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

PATCH_SIZE = 32
_HALF = PATCH_SIZE // 2

# ITU-R 601 luma weights for color inputs.
_LUMA = (0.299, 0.587, 0.114)


class DegenerateHistogramError(ValueError):
    """Raised when an image has a single intensity and cannot be thresholded."""


@dataclass(frozen=True)
class Patch:
    """A 32x32 window of a document, centered on an ink-contour pixel.

    ``pixels`` holds intensities scaled to [0, 1]; ``center`` is the
    (row, col) of the contour pixel in the source image.
    """

    pixels: np.ndarray
    center: tuple[int, int]
    source_doc: str = ""


def load_gray_image(path: str | Path) -> np.ndarray:
    """Load an 8-bit grayscale image (PNG/PGM); color is reduced via luma.

    Color inputs are converted with luma = round(0.299 R + 0.587 G + 0.114 B).
    """
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
        else:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
            luma = rgb[..., 0] * _LUMA[0] + rgb[..., 1] * _LUMA[1] + rgb[..., 2] * _LUMA[2]
            arr = np.clip(np.round(luma), 0, 255).astype(np.uint8)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"not a non-empty grayscale image: {path}")
    return arr


def save_binary_png(mask: np.ndarray, path: str | Path) -> None:
    """Write an ink mask as a PNG (ink black on white) for inspection.

    Written via a temp file and atomic rename, like every other artifact.
    """
    path = Path(path)
    img = np.where(mask, 0, 255).astype(np.uint8)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            Image.fromarray(img, mode="L").save(fh, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def histogram256(img: np.ndarray) -> np.ndarray:
    return np.bincount(np.asarray(img, dtype=np.uint8).ravel(), minlength=256)


def otsu_threshold(img: np.ndarray) -> int:
    """Otsu's threshold: maximize between-class variance of the 256-bin histogram.

    Returns the smallest maximizing threshold t; ink is intensity <= t.
    Raises DegenerateHistogramError for constant images, where no class
    separation exists.
    """
    hist = histogram256(img)
    total = hist.sum()
    if total == 0:
        raise DegenerateHistogramError("empty image")
    if np.count_nonzero(hist) < 2:
        raise DegenerateHistogramError("constant image: single intensity, no class separation")

    levels = np.arange(256, dtype=np.float64)
    p = hist.astype(np.float64) / total
    omega = np.cumsum(p)  # P(intensity <= t)
    mu = np.cumsum(p * levels)  # first moment up to t
    mu_total = mu[-1]

    # between-class variance; undefined where one class is empty
    denom = omega * (1.0 - omega)
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma_b = np.where(denom > 0, (mu_total * omega - mu) ** 2 / denom, -np.inf)
    return int(np.argmax(sigma_b))  # argmax takes the smallest index on ties


def binarize(img: np.ndarray, threshold: int | None = None, invert: bool = False) -> np.ndarray:
    """Threshold a grayscale document into an ink mask (True = ink).

    With ``threshold=None`` the Otsu threshold is computed first.
    """
    if threshold is None:
        threshold = otsu_threshold(img)
    if invert:
        return img > threshold
    return img <= threshold


def extract_contour(mask: np.ndarray) -> np.ndarray:
    """Contour pixels of an ink mask, as an (M, 2) int array of (row, col).

    A contour pixel is an ink pixel with at least one non-ink pixel in
    its 4-neighborhood; image-border pixels count as adjacent to
    non-ink. Rows are emitted in row-major order.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.size == 0:
        return np.empty((0, 2), dtype=np.intp)
    padded = np.pad(mask, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    contour = mask & ~interior
    rows, cols = np.nonzero(contour)  # row-major order
    return np.stack([rows, cols], axis=1)


def sample_patches(
    img: np.ndarray,
    contour: np.ndarray,
    stride: int = 1,
    max_patches: int | None = None,
    seed: int = 0,
    source_doc: str = "",
) -> list[Patch]:
    """Extract 32x32 patches centered on every stride-th contour point.

    The window for center (r, c) spans rows r-16..r+15 and cols
    c-16..c+15; centers whose window does not fit inside the image are
    skipped. Intensities are scaled by 1/255 and not otherwise
    preprocessed. If more than ``max_patches`` centers remain they are
    subsampled uniformly at random with the given seed (original order
    preserved).
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    img = np.asarray(img)
    h, w = img.shape
    contour = np.asarray(contour)
    if contour.size == 0:
        return []

    picked = contour[::stride]
    rows, cols = picked[:, 0], picked[:, 1]
    fits = (rows >= _HALF) & (rows + _HALF <= h) & (cols >= _HALF) & (cols + _HALF <= w)
    picked = picked[fits]

    if max_patches is not None and len(picked) > max_patches:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(picked), size=max_patches, replace=False))
        picked = picked[keep]

    scale = np.float32(1.0 / 255.0)
    patches = []
    for r, c in picked:
        window = img[r - _HALF : r + _HALF, c - _HALF : c + _HALF].astype(np.float32) * scale
        patches.append(Patch(pixels=window, center=(int(r), int(c)), source_doc=source_doc))
    return patches


def patch_matrix(patches: list[Patch]) -> np.ndarray:
    """Stack patches into a (T, 1024) float32 matrix, row-major pixels."""
    if not patches:
        return np.empty((0, PATCH_SIZE * PATCH_SIZE), dtype=np.float32)
    return np.stack([p.pixels.reshape(-1) for p in patches]).astype(np.float32)
