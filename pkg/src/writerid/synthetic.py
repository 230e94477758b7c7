"""Synthetic handwriting-like corpora for tests and the end-to-end benchmark.

Each synthetic "writer" draws short curved strokes with a characteristic
orientation, stroke width and curvature; documents from the same writer
share the style but not the stroke layout. The pages are gray ink on
noisy paper so that Otsu binarization and contour sampling behave like
they do on scans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

N_ANGLES = 10  # angular grid; widths/curvature separate writers beyond it


@dataclass(frozen=True)
class WriterStyle:
    angle: float  # dominant stroke direction, radians in [0, pi)
    width: float  # stroke radius in pixels
    curvature: float  # lateral bend as a fraction of stroke length


def make_styles(n_writers: int) -> list[WriterStyle]:
    """A deterministic grid of mutually distinctive styles."""
    styles = []
    for i in range(n_writers):
        angle = math.pi * (i % N_ANGLES) / N_ANGLES
        width = 1.0 + 1.2 * (i // N_ANGLES % 2)
        curvature = (0.06, 0.28, 0.5)[i % 3]
        styles.append(WriterStyle(angle=angle, width=width, curvature=curvature))
    return styles


def _disk_offsets(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    keep = dy * dy + dx * dx <= radius * radius + 1e-9
    return np.stack([dy[keep], dx[keep]], axis=1)


def render_document(
    style: WriterStyle,
    seed: int,
    height: int = 384,
    width: int = 384,
    strokes: int = 140,
) -> np.ndarray:
    """Render one page as a (height, width) uint8 grayscale array."""
    rng = np.random.default_rng(seed)
    img = np.clip(rng.normal(235.0, 5.0, size=(height, width)), 210, 255)
    offsets = _disk_offsets(style.width)
    margin = 24

    for _ in range(strokes):
        r0 = rng.uniform(margin, height - margin)
        c0 = rng.uniform(margin, width - margin)
        length = rng.uniform(28.0, 44.0)
        angle = style.angle + rng.normal(0.0, 0.06)
        bend = style.curvature * length * rng.uniform(0.7, 1.3)
        u = np.array([math.sin(angle), math.cos(angle)])  # (drow, dcol)
        nvec = np.array([u[1], -u[0]])

        ts = np.linspace(0.0, 1.0, int(2 * length))
        pts = (
            np.array([r0, c0])
            + ts[:, None] * length * u
            + (bend * np.sin(math.pi * ts))[:, None] * nvec
        )
        pts = np.round(pts).astype(np.intp)
        ink = np.clip(rng.normal(55.0, 15.0), 15, 100)
        for dy, dx in offsets:
            rr = pts[:, 0] + dy
            cc = pts[:, 1] + dx
            ok = (rr >= 0) & (rr < height) & (cc >= 0) & (cc < width)
            img[rr[ok], cc[ok]] = np.minimum(img[rr[ok], cc[ok]], ink)
    return img.astype(np.uint8)


def generate_corpus(
    out_dir: str | Path,
    n_writers: int = 20,
    docs_per_writer: int = 4,
    seed: int = 0,
    height: int = 384,
    width: int = 384,
    strokes: int = 140,
) -> Path:
    """Write a PNG corpus plus a manifest file; returns the manifest path.

    Image files are named ``w{writer:03d}_{doc}.png`` so the default
    ``{writer}_{doc}`` id pattern applies.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    styles = make_styles(n_writers)
    lines = []
    for wi, style in enumerate(styles):
        for doc in range(1, docs_per_writer + 1):
            img = render_document(
                style, seed=seed + 1009 * wi + doc, height=height, width=width, strokes=strokes
            )
            name = f"w{wi:03d}_{doc}.png"
            Image.fromarray(img, mode="L").save(out_dir / name)
            lines.append(name)
    manifest = out_dir / "manifest.txt"
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest
