"""Deterministic synthetic test images and corpora."""
from __future__ import annotations

import os

import numpy as np

from .imagecore import Image, make_rng, save_image


def step_edge(size: int = 64, low=(0.2, 0.25, 0.3), high=(0.8, 0.75, 0.7), vertical: bool = True) -> Image:
    """Two flat halves split at column (or row) size // 2."""
    arr = np.empty((3, size, size))
    lo = np.asarray(low)[:, None, None]
    hi = np.asarray(high)[:, None, None]
    arr[:] = lo
    if vertical:
        arr[:, :, size // 2:] = hi[:, :, :]
    else:
        arr[:, size // 2:, :] = hi[:, :, :]
    return Image(arr)


def add_noise(img: Image, sigma: float, rng) -> Image:
    arr = img.data + sigma * rng.standard_normal(img.shape)
    return Image(np.clip(arr, 0.0, 1.0))


def checkerboard(height: int, width: int, cell: int = 2, lo: float = 0.2, hi: float = 0.8) -> Image:
    yy, xx = np.mgrid[0:height, 0:width]
    board = ((yy // cell + xx // cell) % 2).astype(np.float64)
    return Image(np.broadcast_to(lo + (hi - lo) * board, (3, height, width)))


def piecewise_scene(height: int, width: int, rng, noise: float = 0.04, texture: bool = True) -> Image:
    """Random flat shapes over a smooth ramp, optional stripe texture, plus noise."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = rng.uniform(0.2, 0.8, 3)
    tilt = rng.uniform(-0.2, 0.2, (3, 2))
    arr = base[:, None, None] + tilt[:, 0, None, None] * (yy / height - 0.5) + tilt[:, 1, None, None] * (xx / width - 0.5)
    for _ in range(int(rng.integers(2, 5))):
        color = rng.uniform(0.05, 0.95, 3)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, height - 4), rng.integers(0, width - 4)
            hh, ww = rng.integers(4, max(5, height // 2)), rng.integers(4, max(5, width // 2))
            region = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        else:
            cy, cx = rng.uniform(0, height), rng.uniform(0, width)
            rad = rng.uniform(3, max(4, min(height, width) / 3))
            region = (yy - cy) ** 2 + (xx - cx) ** 2 < rad ** 2
        arr[:, region] = color[:, None]
    if texture and rng.random() < 0.7:
        period = int(rng.integers(2, 5))
        amp = rng.uniform(0.04, 0.12)
        stripes = amp * np.sign(np.sin(2 * np.pi * (xx + yy * rng.integers(0, 2)) / (2 * period)))
        y0, x0 = rng.integers(0, height // 2), rng.integers(0, width // 2)
        mask = (yy >= y0) & (yy < y0 + height // 2) & (xx >= x0) & (xx < x0 + width // 2)
        arr[:, mask] += stripes[mask]
    arr = arr + noise * rng.standard_normal(arr.shape)
    return Image(np.clip(arr, 0.0, 1.0))


def write_corpus(directory, count: int, size: int, seed: int, noise: float = 0.04) -> list[str]:
    """Write ``count`` scenes as PNG files named img_000.png, ... and return their paths."""
    os.makedirs(directory, exist_ok=True)
    rng = make_rng(seed)
    paths = []
    for k in range(count):
        path = os.path.join(directory, f"img_{k:03d}.png")
        save_image(piecewise_scene(size, size, rng, noise=noise), path)
        paths.append(path)
    return paths
