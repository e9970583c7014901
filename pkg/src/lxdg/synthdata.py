"""Procedural stand-in digit dataset in the standard IDX file format.

Real handwritten-digit files are not bundled with the package, so this module
renders ten stroke-skeleton glyph classes (28x28 grayscale, centered,
size-normalized, randomly jittered per sample) and writes them as IDX files
with the official names and layout. Benchmarks run unchanged on either these
files or real ones supplied by the user.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

SIDE = 28

# glyph space: x in [0,1] right, y in [0,1] down; per class, a list of style
# variants, each a list of polylines. Multiple handwriting-like variants per
# class give the intra-class variability that makes the problem MNIST-hard.
def _ellipse(cx, cy, rx, ry, n=10, start=0.0, sweep=2.0 * np.pi):
    t = start + sweep * np.arange(n + 1) / n
    return np.stack([cx + rx * np.sin(t), cy - ry * np.cos(t)], axis=1)


_GLYPHS: dict[int, list[list[np.ndarray]]] = {
    0: [[_ellipse(0.5, 0.5, 0.26, 0.38)],
        [_ellipse(0.5, 0.5, 0.32, 0.34)]],
    1: [[np.array([[0.32, 0.28], [0.55, 0.10], [0.55, 0.90]])],
        [np.array([[0.50, 0.12], [0.50, 0.90]]),
         np.array([[0.34, 0.90], [0.66, 0.90]])]],
    2: [[np.array([[0.27, 0.30], [0.36, 0.13], [0.60, 0.10], [0.73, 0.26],
                   [0.66, 0.46], [0.26, 0.87], [0.75, 0.87]])],
        [np.array([[0.28, 0.24], [0.50, 0.10], [0.72, 0.24], [0.70, 0.44],
                   [0.44, 0.62], [0.26, 0.88], [0.76, 0.84]])]],
    3: [[np.array([[0.28, 0.16], [0.58, 0.10], [0.72, 0.28], [0.52, 0.47],
                   [0.74, 0.66], [0.58, 0.89], [0.26, 0.82]])],
        [np.array([[0.26, 0.12], [0.72, 0.12], [0.48, 0.44]]),
         _ellipse(0.50, 0.66, 0.23, 0.23, n=8, start=-0.8 * np.pi, sweep=1.6 * np.pi)]],
    4: [[np.array([[0.62, 0.10], [0.24, 0.62], [0.80, 0.62]]),
        np.array([[0.64, 0.38], [0.64, 0.92]])],
        [np.array([[0.34, 0.10], [0.30, 0.55], [0.78, 0.55]]),
         np.array([[0.62, 0.30], [0.62, 0.92]])]],
    5: [[np.array([[0.72, 0.12], [0.32, 0.12], [0.30, 0.45], [0.58, 0.42],
                   [0.74, 0.62], [0.58, 0.87], [0.27, 0.80]])],
        [np.array([[0.70, 0.10], [0.30, 0.14], [0.32, 0.40]]),
         _ellipse(0.50, 0.64, 0.24, 0.25, n=8, start=-0.7 * np.pi, sweep=1.5 * np.pi)]],
    6: [[np.array([[0.64, 0.10], [0.40, 0.38], [0.29, 0.62]]),
        _ellipse(0.49, 0.67, 0.21, 0.21, n=8)],
        [np.array([[0.58, 0.08], [0.34, 0.44], [0.30, 0.70]]),
         _ellipse(0.50, 0.70, 0.19, 0.18, n=8)]],
    7: [[np.array([[0.25, 0.12], [0.75, 0.12], [0.42, 0.90]])],
        [np.array([[0.25, 0.14], [0.75, 0.14], [0.45, 0.88]]),
         np.array([[0.36, 0.50], [0.66, 0.50]])]],
    8: [[_ellipse(0.5, 0.30, 0.20, 0.19, n=8),
        _ellipse(0.5, 0.68, 0.24, 0.21, n=8)],
        [_ellipse(0.5, 0.32, 0.23, 0.21, n=8),
         _ellipse(0.5, 0.70, 0.20, 0.19, n=8)]],
    9: [[_ellipse(0.52, 0.33, 0.21, 0.22, n=8),
        np.array([[0.72, 0.42], [0.60, 0.90]])],
        [_ellipse(0.50, 0.34, 0.22, 0.23, n=8),
         np.array([[0.71, 0.40], [0.71, 0.90]])]],
}


def _segments(points: np.ndarray) -> np.ndarray:
    return np.stack([points[:-1], points[1:]], axis=1)  # [S, 2(end), 2(xy)]


_VARIANT_SEGS = {
    (d, v): np.concatenate([_segments(p) for p in polys], axis=0)
    for d, variants in _GLYPHS.items()
    for v, polys in enumerate(variants)
}


def _render_variant(digit: int, variant: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Render ``count`` jittered samples of one glyph variant -> [count, 784] uint8."""
    segs = _VARIANT_SEGS[(digit, variant)]  # [S, 2, 2]
    s = segs.shape[0]
    # per-sample affine jitter around the glyph center
    theta = rng.uniform(-0.22, 0.22, size=count)
    scale_x = rng.uniform(0.78, 1.18, size=count)
    scale_y = rng.uniform(0.78, 1.18, size=count)
    shear = rng.uniform(-0.22, 0.22, size=count)
    shift = rng.uniform(-1.8, 1.8, size=(count, 2))
    thickness = rng.uniform(0.75, 1.45, size=count)
    ink = rng.uniform(0.75, 1.0, size=count)
    # vertex wobble: independent deformation of every stroke endpoint
    wobble = rng.normal(scale=0.035, size=(count, 2 * s, 2))

    pts = segs.reshape(-1, 2) - 0.5  # [2S, 2] centered glyph coords
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    # rotation * shear * scale, row-vector convention
    a11 = scale_x * (cos_t + shear * sin_t)
    a12 = scale_x * sin_t
    a21 = scale_y * (shear * cos_t - sin_t)
    a22 = scale_y * cos_t
    x = pts[None, :, 0] + wobble[:, :, 0]
    y = pts[None, :, 1] + wobble[:, :, 1]
    gx = a11[:, None] * x + a21[:, None] * y
    gy = a12[:, None] * x + a22[:, None] * y
    # glyph box maps to ~19px span centered on the grid
    px = gx * 19.0 + (SIDE - 1) / 2.0 + shift[:, :1]
    py = gy * 19.0 + (SIDE - 1) / 2.0 + shift[:, 1:]
    ends = np.stack([px, py], axis=2).reshape(count, s, 2, 2)  # [B, S, end, xy]

    grid = np.stack(np.meshgrid(np.arange(SIDE), np.arange(SIDE), indexing="xy"),
                    axis=2).reshape(-1, 2).astype(np.float64)  # [784, 2] as (x, y)

    a = ends[:, :, 0, :]  # [B, S, 2]
    b = ends[:, :, 1, :]
    ab = b - a
    denom = np.maximum((ab * ab).sum(axis=2), 1e-12)  # [B, S]
    # point-to-segment distance for every pixel against every segment
    ap = grid[None, :, None, :] - a[:, None, :, :]  # [B, 784, S, 2]
    t = np.clip((ap * ab[:, None, :, :]).sum(axis=3) / denom[:, None, :], 0.0, 1.0)
    nearest = a[:, None, :, :] + t[..., None] * ab[:, None, :, :]
    diff = grid[None, :, None, :] - nearest
    dist = np.sqrt((diff * diff).sum(axis=3)).min(axis=2)  # [B, 784]

    value = np.clip((thickness[:, None] + 0.55 - dist) / 1.05, 0.0, 1.0)
    value *= ink[:, None]
    return np.round(value * 255.0).astype(np.uint8)


def render_digits(count: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Balanced, shuffled sample set: images [count, 784] uint8, labels [count]."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % 10).astype(np.uint8)
    images = np.zeros((count, SIDE * SIDE), dtype=np.uint8)
    chunk = 2000  # bounds the [B, 784, S, 2] scratch arrays
    for digit in range(10):
        idx = np.nonzero(labels == digit)[0]
        variants = rng.integers(0, len(_GLYPHS[digit]), size=idx.size)
        for variant in range(len(_GLYPHS[digit])):
            chosen = idx[variants == variant]
            for start in range(0, chosen.size, chunk):
                part = chosen[start:start + chunk]
                images[part] = _render_variant(digit, variant, part.size, rng)
    return images, labels


def write_idx_images(path, images: np.ndarray, compress: bool = False) -> None:
    n = images.shape[0]
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, SIDE, SIDE))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels: np.ndarray, compress: bool = False) -> None:
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


IDX_FILENAMES = {
    ("train", "images"): "train-images-idx3-ubyte",
    ("train", "labels"): "train-labels-idx1-ubyte",
    ("test", "images"): "t10k-images-idx3-ubyte",
    ("test", "labels"): "t10k-labels-idx1-ubyte",
}


def generate_dataset_dir(
    out_dir, n_train: int = 60000, n_test: int = 10000, seed: int = 0, compress: bool = False
) -> Path:
    """Write a full train/test IDX quartet with the official file names."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = ".gz" if compress else ""
    train_images, train_labels = render_digits(n_train, seed=seed)
    test_images, test_labels = render_digits(n_test, seed=seed + 1)
    write_idx_images(out_dir / (IDX_FILENAMES[("train", "images")] + suffix), train_images, compress)
    write_idx_labels(out_dir / (IDX_FILENAMES[("train", "labels")] + suffix), train_labels, compress)
    write_idx_images(out_dir / (IDX_FILENAMES[("test", "images")] + suffix), test_images, compress)
    write_idx_labels(out_dir / (IDX_FILENAMES[("test", "labels")] + suffix), test_labels, compress)
    return out_dir
