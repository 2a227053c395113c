"""Desk-scale synthetic datasets and the 8x8 image-batch file format.

`blobs` renders 8x8 single-channel images whose class is a gaussian blob
position; `spiral` is the classic 2-feature multi-arm spiral.  Image batches
round-trip through .npz files with `images` (N, C, 8, 8) and `labels` (N,)
arrays.
"""

from __future__ import annotations

import numpy as np


def blobs(n: int, seed: int = 0, size: int = 8, classes: int = 3, noise: float = 0.25):
    """Images (N, 1, size, size) in roughly [-1, 2], labels (N,)."""
    rng = np.random.default_rng(seed)
    centers = [
        (size * 0.25, size * 0.25),
        (size * 0.75, size * 0.65),
        (size * 0.3, size * 0.75),
        (size * 0.7, size * 0.25),
    ]
    labels = rng.integers(0, classes, size=n)
    yy, xx = np.mgrid[0:size, 0:size]
    images = np.empty((n, 1, size, size))
    for i, lab in enumerate(labels):
        cy, cx = centers[lab % len(centers)]
        cy += rng.normal(0, 0.4)
        cx += rng.normal(0, 0.4)
        blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 1.6**2)))
        images[i, 0] = 2.0 * blob + rng.normal(0, noise, (size, size))
    return images, labels


def spiral(n: int, seed: int = 0, classes: int = 3, noise: float = 0.1):
    """Points (N, 2), labels (N,): `classes` interleaved spiral arms."""
    rng = np.random.default_rng(seed)
    per = n // classes
    xs, ys = [], []
    for c in range(classes):
        t = np.linspace(0.2, 1.0, per) ** 0.7
        ang = 2 * np.pi * (c / classes + t * 1.25) + rng.normal(0, noise, per)
        rad = t * 2.0
        xs.append(np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1))
        ys.append(np.full(per, c))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    order = rng.permutation(len(y))
    return x[order], y[order]


def save_images8(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[2] != 8 or images.shape[3] != 8:
        raise ValueError(f"expected (N, C, 8, 8) images, got {images.shape}")
    np.savez(path, images=images, labels=np.asarray(labels, dtype=np.int64))


def load_images8(path):
    with np.load(path) as doc:
        images = np.asarray(doc["images"], dtype=np.float64)
        labels = np.asarray(doc["labels"], dtype=np.int64)
    if images.ndim != 4 or images.shape[2] != 8 or images.shape[3] != 8:
        raise ValueError(f"{path}: expected (N, C, 8, 8) images, got {images.shape}")
    if labels.shape[0] != images.shape[0]:
        raise ValueError(f"{path}: {images.shape[0]} images but {labels.shape[0]} labels")
    return images, labels


def split(x, y, frac: float = 0.5, seed: int = 0):
    """Shuffled train/val split (the search trains alpha on the val half)."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(y))
    cut = int(len(y) * frac)
    tr, va = order[:cut], order[cut:]
    return (x[tr], y[tr]), (x[va], y[va])


def batches(x, y, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(y))
    for i in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[i : i + batch_size]
        yield x[idx], y[idx]
