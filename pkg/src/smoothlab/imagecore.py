"""Raster type, color conversion, file I/O and cropping.

Images are stored planar (channel, row, column) as float64 in [0, 1].
PNG goes through Pillow; binary PPM/PGM (P6/P5) is parsed here so that
header errors can be reported precisely.
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage


class ImageIOError(Exception):
    """Base class for raster read/write failures."""

    code = "io"


class ImageFormatError(ImageIOError):
    code = "format"


class UnsupportedDepthError(ImageIOError):
    code = "depth"


@dataclass(frozen=True)
class Image:
    """Planar floating point raster.

    ``data`` has shape (channels, height, width). ``unclamped`` marks
    intermediate layers (residuals, detail layers) that may leave [0, 1].
    """

    data: np.ndarray
    unclamped: bool = field(default=False)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] not in (1, 3):
            raise ValueError(f"expected (C,H,W) with C in {{1,3}}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        if not self.unclamped and (arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0):
            raise ValueError("values outside [0,1] require unclamped=True")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def flat(self) -> np.ndarray:
        """Planar channel-major values as a 1-D array."""
        return self.data.reshape(-1)

    @classmethod
    def from_hwc(cls, arr, unclamped=False) -> "Image":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            return cls(arr[None], unclamped=unclamped)
        return cls(np.moveaxis(arr, -1, 0), unclamped=unclamped)

    def to_hwc(self) -> np.ndarray:
        return np.moveaxis(self.data, 0, -1)


def as_array(img) -> np.ndarray:
    """Return the (C,H,W) float array behind an Image or array-like."""
    if isinstance(img, Image):
        return img.data
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator (PCG64); streams are identical across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


# -- raster I/O ---------------------------------------------------------------

def _quantize(arr: np.ndarray) -> np.ndarray:
    # round half up; np.round would round half to even
    clipped = np.clip(arr, 0.0, 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)


def _read_pnm(raw: bytes, path) -> np.ndarray:
    magic = raw[:2]
    if magic not in (b"P6", b"P5"):
        raise ImageFormatError(f"{path}: not a binary PPM/PGM file")
    tokens = []
    pos = 2
    n = len(raw)
    while len(tokens) < 3:
        while pos < n and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < n and raw[pos:pos + 1] == b"#":
            while pos < n and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not raw[pos:pos + 1].isspace() and raw[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated header")
        tok = raw[start:pos]
        if not tok.isdigit():
            raise ImageFormatError(f"{path}: bad header token {tok!r}")
        tokens.append(int(tok))
    if pos >= n or not raw[pos:pos + 1].isspace():
        raise ImageFormatError(f"{path}: truncated header")
    pos += 1
    width, height, maxval = tokens
    if maxval != 255:
        raise UnsupportedDepthError(f"{path}: maxval {maxval} (only 8-bit supported)")
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"{path}: empty raster")
    channels = 3 if magic == b"P6" else 1
    count = width * height * channels
    body = raw[pos:pos + count]
    if len(body) < count:
        raise ImageFormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)
    return np.moveaxis(arr, -1, 0)


def _read_png(path) -> np.ndarray:
    try:
        with PILImage.open(path) as im:
            if im.format != "PNG":
                raise ImageFormatError(f"{path}: unsupported format {im.format}")
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "F"):
                raise UnsupportedDepthError(f"{path}: 16-bit/float PNG not supported")
            if mode == "1":
                raise UnsupportedDepthError(f"{path}: 1-bit PNG not supported")
            if mode in ("L", "LA"):
                arr = np.asarray(im.convert("L"))[None]
            else:
                arr = np.moveaxis(np.asarray(im.convert("RGB")), -1, 0)
    except ImageIOError:
        raise
    except OSError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    return arr


def load_image(path) -> Image:
    """Read an 8-bit PNG or binary PPM/PGM; byte v maps to v/255."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ImageIOError(f"cannot read {path}: {exc}") from exc
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        arr = _read_png(path)
    elif raw[:2] in (b"P6", b"P5"):
        arr = _read_pnm(raw, path)
    else:
        raise ImageFormatError(f"{path}: unrecognized file signature")
    return Image(arr.astype(np.float64) / 255.0)


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    except OSError as exc:
        raise ImageIOError(f"cannot write {path}: {exc}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise ImageIOError(f"cannot write {path}: {exc}") from exc


def encode_image(img, ext: str) -> bytes:
    arr = _quantize(as_array(img))
    ext = ext.lower()
    if ext in (".ppm", ".pgm", ".pnm"):
        magic = b"P6" if arr.shape[0] == 3 else b"P5"
        header = b"%s\n%d %d\n255\n" % (magic, arr.shape[2], arr.shape[1])
        return header + np.ascontiguousarray(np.moveaxis(arr, 0, -1)).tobytes()
    if ext == ".png":
        import io

        hwc = arr[0] if arr.shape[0] == 1 else np.moveaxis(arr, 0, -1)
        buf = io.BytesIO()
        PILImage.fromarray(np.ascontiguousarray(hwc)).save(buf, format="PNG")
        return buf.getvalue()
    raise ImageFormatError(f"unsupported output extension {ext!r}")


def save_image(img, path) -> None:
    """Clamp to [0,1], quantize round(v*255) half-up, write PNG or PNM by extension."""
    arr = as_array(img)
    if arr.shape[0] not in (1, 3):
        raise ValueError("save_image needs 1 or 3 channels")
    ext = os.path.splitext(os.fspath(path))[1]
    atomic_write_bytes(path, encode_image(arr, ext))


# -- color ---------------------------------------------------------------------

# BT.601 full range
_RGB2YUV = np.array([
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
])
_YUV2RGB = np.linalg.inv(_RGB2YUV)
YUV_OFFSET = np.array([0.0, 0.5, 0.5])


def rgb_to_yuv(img) -> Image:
    """BT.601 full-range YUV. U and V are stored shifted by +0.5."""
    arr = as_array(img)
    if arr.shape[0] != 3:
        raise ValueError("rgb_to_yuv needs a 3-channel image")
    yuv = np.einsum("ij,jhw->ihw", _RGB2YUV, arr) + YUV_OFFSET[:, None, None]
    return Image(yuv, unclamped=True)


def yuv_to_rgb(img) -> Image:
    arr = as_array(img)
    if arr.shape[0] != 3:
        raise ValueError("yuv_to_rgb needs a 3-channel image")
    rgb = np.einsum("ij,jhw->ihw", _YUV2RGB, arr - YUV_OFFSET[:, None, None])
    return Image(rgb, unclamped=True)


# -- cropping ------------------------------------------------------------------

def crop(img, x0: int, y0: int, size, rng=None):
    """Copy the ``size`` (int or (h, w)) window whose top-left corner is (x0, y0).

    When ``rng`` is given, x0/y0 that are None are drawn uniformly from the
    valid range. Works on Image and on planar/2-D arrays.
    """
    arr = img.data if isinstance(img, Image) else np.asarray(img)
    h, w = arr.shape[-2:]
    ch, cw = (size, size) if np.isscalar(size) else size
    if rng is not None:
        if y0 is None:
            y0 = int(rng.integers(0, h - ch + 1))
        if x0 is None:
            x0 = int(rng.integers(0, w - cw + 1))
    if x0 < 0 or y0 < 0 or ch <= 0 or cw <= 0 or y0 + ch > h or x0 + cw > w:
        raise ValueError(f"crop ({x0},{y0},{cw}x{ch}) outside {w}x{h}")
    out = arr[..., y0:y0 + ch, x0:x0 + cw].copy()
    if isinstance(img, Image):
        return Image(out, unclamped=img.unclamped)
    return out


def random_crop_origin(height: int, width: int, size: int, rng) -> tuple[int, int]:
    """Draw (x0, y0) for a size x size crop."""
    if size > height or size > width:
        raise ValueError(f"crop {size} larger than {width}x{height}")
    y0 = int(rng.integers(0, height - size + 1))
    x0 = int(rng.integers(0, width - size + 1))
    return x0, y0
