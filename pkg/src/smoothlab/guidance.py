"""Edge responses, important-edge and texture masks, guidance masking."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage

from .imagecore import ImageIOError, as_array, atomic_write_bytes, encode_image, load_image

_EIGHT = np.ones((3, 3), dtype=bool)

NEIGHBOR_OFFSETS = {
    4: ((-1, 0), (1, 0), (0, -1), (0, 1)),
    8: ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)),
}


@dataclass(frozen=True)
class GuidanceMap:
    """Per-pixel nonnegative edge response, shape (H, W)."""

    response: np.ndarray

    def __post_init__(self):
        arr = np.array(self.response, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError("guidance response must be 2-D")
        if np.any(arr < 0) or not np.all(np.isfinite(arr)):
            raise ValueError("guidance response must be finite and >= 0")
        arr.flags.writeable = False
        object.__setattr__(self, "response", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.response.shape


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray

    def __post_init__(self):
        arr = np.array(self.bits, dtype=bool, copy=True)
        if arr.ndim != 2:
            raise ValueError("mask must be 2-D")
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @cached_property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))


def shifted_pairs(shape, dy: int, dx: int):
    """Slices (src, dst) such that arr[src] are pixels i and arr[dst] their
    neighbors j = i + (dy, dx), restricted to pairs where both are in bounds."""
    h, w = shape
    ys = slice(max(0, -dy), h - max(0, dy))
    xs = slice(max(0, -dx), w - max(0, dx))
    yd = slice(max(0, dy), h - max(0, -dy))
    xd = slice(max(0, dx), w - max(0, -dx))
    return (ys, xs), (yd, xd)


def channel_sum(img) -> np.ndarray:
    return as_array(img).sum(axis=0)


def edge_response(img, neighborhood: int = 4) -> GuidanceMap:
    """E_i = sum over neighbors j of |sum_c (I_ic - I_jc)|; missing neighbors skipped."""
    if neighborhood not in NEIGHBOR_OFFSETS:
        raise ValueError("neighborhood must be 4 or 8")
    s = channel_sum(img)
    out = np.zeros_like(s)
    for dy, dx in NEIGHBOR_OFFSETS[neighborhood]:
        src, dst = shifted_pairs(s.shape, dy, dx)
        out[src] += np.abs(s[src] - s[dst])
    return GuidanceMap(out)


def detect_important_edges(guide: GuidanceMap, high: float = 0.9, low: float = 0.5,
                           min_len: int = 10) -> BinaryMask:
    """Hysteresis threshold (8-connected) followed by a component length filter.

    Components of {E >= low} survive if they touch a seed pixel {E >= high}
    and contain at least ``min_len`` pixels.
    """
    if not high >= low >= 0:
        raise ValueError("need high >= low >= 0")
    e = guide.response
    weak = e >= low
    labels, n = ndimage.label(weak, structure=_EIGHT)
    if n == 0:
        return BinaryMask(weak)
    idx = np.arange(1, n + 1)
    seeded = ndimage.maximum(e >= high, labels, idx).astype(bool)
    sizes = ndimage.sum(weak, labels, idx)
    keep = np.zeros(n + 1, dtype=bool)
    keep[1:] = seeded & (sizes >= min_len)
    return BinaryMask(keep[labels])


def local_density(bits: np.ndarray, window: int) -> np.ndarray:
    """Fraction of set pixels in the window, counting in-bounds pixels only."""
    b = bits.astype(np.float64)
    hits = ndimage.uniform_filter(b, size=window, mode="constant")
    area = ndimage.uniform_filter(np.ones_like(b), size=window, mode="constant")
    return hits / area


def detect_texture(guide: GuidanceMap, window: int = 7, density: float = 0.5,
                   max_len: int = 30, edge_threshold: float = 0.1) -> BinaryMask:
    """Mark fine-scale repetitive edge pixels.

    An edge pixel (E >= edge_threshold) is texture when its window is dense
    with edges and its 8-connected component is either short (<= max_len
    pixels) or a dense mesh on average. Isolated long contours stay unmarked.
    """
    if window % 2 != 1 or window < 1:
        raise ValueError("window must be odd")
    edges = guide.response >= edge_threshold
    dens = local_density(edges, window)
    labels, n = ndimage.label(edges, structure=_EIGHT)
    if n == 0:
        return BinaryMask(edges)
    idx = np.arange(1, n + 1)
    sizes = ndimage.sum(edges, labels, idx)
    mesh = ndimage.mean(dens, labels, idx) > density
    ok = np.zeros(n + 1, dtype=bool)
    ok[1:] = (sizes <= max_len) | mesh
    return BinaryMask(edges & (dens > density) & ok[labels])


def mask_guidance(guide: GuidanceMap, mask: BinaryMask) -> GuidanceMap:
    """Zero the response wherever the mask is set."""
    if guide.shape != mask.shape:
        raise ValueError(f"mask {mask.shape} does not match guidance {guide.shape}")
    return GuidanceMap(np.where(mask.bits, 0.0, guide.response))


def dilate_mask(mask: BinaryMask, radius: int) -> BinaryMask:
    """Dilation with a (2r+1)x(2r+1) square."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return mask
    return BinaryMask(ndimage.maximum_filter(mask.bits, size=2 * radius + 1, mode="constant", cval=False))


def load_mask(path) -> BinaryMask:
    """Gray PNG/PGM mask; pixels >= 128 are set."""
    img = load_image(path)
    if img.channels != 1:
        raise ImageIOError(f"{path}: mask must be single-channel")
    return BinaryMask(img.data[0] >= 128 / 255.0)


def save_mask(mask: BinaryMask, path) -> None:
    import os

    ext = os.path.splitext(os.fspath(path))[1]
    atomic_write_bytes(path, encode_image(mask.bits[None].astype(np.float64), ext))
