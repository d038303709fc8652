"""Image I/O, grayscale conversion, resampling and JPEG recompression.

Images are plain numpy arrays in the [0, 1] float domain:

* gray: ``(H, W)`` float64
* rgb:  ``(H, W, 3)`` float64

8-bit interchange converts by ``v / 255`` on read and ``round(v * 255)`` on
write. PNG is the lossless format for images and ground truth maps.
"""

from __future__ import annotations

import io
import os
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# ITU-T T.81 Annex K, natural (row-major) order.
BASE_LUMA_TABLE = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
], dtype=np.int64).reshape(8, 8)

BASE_CHROMA_TABLE = np.array([
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
], dtype=np.int64).reshape(8, 8)

# Below this quality chroma is subsampled 4:2:0, otherwise kept at 4:4:4.
SUBSAMPLING_SWITCH_QUALITY = 90


class ImageError(ValueError):
    """Raised for malformed images or impossible geometry."""


class JpegError(RuntimeError):
    """JPEG encode/decode failure; ``stage`` is ``"encode"`` or ``"decode"``."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"jpeg {stage} failed: {message}")
        self.stage = stage


def check_gray(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageError(f"expected a non-empty (H, W) gray image, got shape {img.shape}")
    return img


def check_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageError(f"expected a non-empty (H, W, 3) rgb image, got shape {img.shape}")
    return img


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """BT.601 luma of an rgb image; gray input is returned unchanged."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return check_gray(img)
    img = check_rgb(img)
    r, g, b = LUMA_WEIGHTS
    return r * img[..., 0] + g * img[..., 1] + b * img[..., 2]


def gray_to_rgb(img: np.ndarray) -> np.ndarray:
    img = check_gray(img)
    return np.repeat(img[..., None], 3, axis=2)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return np.asarray(arr, dtype=np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _resample_axis(img: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = img.shape[axis]
    if n_out == n_in:
        return img
    # half-pixel-centre convention: output pixel k samples input (k + .5) * n_in / n_out - .5
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    w = pos - lo
    a = np.take(img, lo, axis=axis)
    b = np.take(img, hi, axis=axis)
    shape = [1] * img.ndim
    shape[axis] = n_out
    w = w.reshape(shape)
    return a * (1.0 - w) + b * w


def resample(img: np.ndarray, factor: float, method: str = "bilinear") -> np.ndarray:
    """Rescale by ``factor``; output dims are ``round(factor * dims)``.

    Works on gray and rgb arrays. Raises :class:`ImageError` if an output
    dimension would be zero.
    """
    if method != "bilinear":
        raise ValueError(f"unsupported resampling method {method!r}")
    if not factor > 0:
        raise ImageError(f"resample factor must be positive, got {factor}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    h_out = int(np.floor(h * factor + 0.5))
    w_out = int(np.floor(w * factor + 0.5))
    if h_out < 1 or w_out < 1:
        raise ImageError(f"resampling {h}x{w} by {factor} gives an empty image")
    out = _resample_axis(img, h_out, 0)
    return _resample_axis(out, w_out, 1)


def sample_bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray, fill=0.0):
    """Bilinear lookup at float coordinates (pixel centres on integers).

    Returns ``(values, valid)``; positions outside ``[0, W-1] x [0, H-1]``
    get ``fill`` and ``valid=False``.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    eps = 1e-9
    valid = (x >= -eps) & (x <= w - 1 + eps) & (y >= -eps) & (y <= h - 1 + eps)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    mask = valid[..., None] if img.ndim == 3 else valid
    return np.where(mask, out, fill), valid


# ---------------------------------------------------------------- JPEG

def quality_scaling(quality: int) -> int:
    """libjpeg quality -> percentage scale factor S."""
    q = int(quality)
    if not 1 <= q <= 100:
        raise ValueError(f"JPEG quality must be in 1..100, got {quality}")
    return 5000 // q if q < 50 else 200 - 2 * q


def quant_tables(quality: int) -> tuple[np.ndarray, np.ndarray]:
    """Baseline luma/chroma quantization tables (8x8, natural order)."""
    s = quality_scaling(quality)
    out = []
    for base in (BASE_LUMA_TABLE, BASE_CHROMA_TABLE):
        out.append(np.clip((base * s + 50) // 100, 1, 255))
    return out[0], out[1]


def default_subsampling(quality: int) -> str:
    return "4:2:0" if quality < SUBSAMPLING_SWITCH_QUALITY else "4:4:4"


_PIL_SUBSAMPLING = {"4:4:4": 0, "4:2:2": 1, "4:2:0": 2}


def encode_jpeg(img: np.ndarray, quality: int, subsampling: str | None = None) -> bytes:
    """Baseline JFIF bytes for an rgb (or gray) image."""
    luma, chroma = quant_tables(quality)
    if subsampling is None:
        subsampling = default_subsampling(quality)
    if subsampling not in _PIL_SUBSAMPLING:
        raise ValueError(f"unknown chroma subsampling {subsampling!r}")
    arr = to_uint8(img)
    try:
        pil = Image.fromarray(arr, mode="L" if arr.ndim == 2 else "RGB")
        buf = io.BytesIO()
        pil.save(
            buf,
            format="JPEG",
            qtables=[luma.ravel().tolist(), chroma.ravel().tolist()],
            subsampling=_PIL_SUBSAMPLING[subsampling],
            optimize=False,
            progressive=False,
        )
    except Exception as exc:  # PIL raises a mix of OSError/ValueError
        raise JpegError("encode", str(exc)) from exc
    return buf.getvalue()


def decode_jpeg(data: bytes) -> np.ndarray:
    try:
        with Image.open(io.BytesIO(data)) as pil:
            pil.load()
            arr = np.asarray(pil.convert("RGB") if pil.mode != "L" else pil)
    except Exception as exc:
        raise JpegError("decode", str(exc)) from exc
    return from_uint8(arr)


def jpeg_roundtrip(img: np.ndarray, quality: int, subsampling: str | None = None) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    out = decode_jpeg(encode_jpeg(img, quality, subsampling))
    if img.ndim == 3 and out.ndim == 2:
        out = gray_to_rgb(out)
    return out


# ---------------------------------------------------------------- files

def _open(path):
    try:
        return Image.open(path)
    except UnidentifiedImageError as exc:
        raise ImageError(f"cannot decode image {path}") from exc


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Read any PIL-supported file as rgb float in [0, 1]."""
    with _open(path) as pil:
        return from_uint8(np.asarray(pil.convert("RGB")))


def read_gray_u8(path: str | os.PathLike) -> np.ndarray:
    with _open(path) as pil:
        return np.asarray(pil.convert("L"))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def png_bytes(arr_u8: np.ndarray) -> bytes:
    arr_u8 = np.asarray(arr_u8, dtype=np.uint8)
    buf = io.BytesIO()
    # fixed compression level keeps the bytes stable across runs
    Image.fromarray(arr_u8).save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def write_png(path: str | os.PathLike, img: np.ndarray) -> None:
    """Write a float image in [0, 1] (gray or rgb) as 8-bit PNG."""
    atomic_write_bytes(path, png_bytes(to_uint8(img)))


def write_png_u8(path: str | os.PathLike, arr_u8: np.ndarray) -> None:
    atomic_write_bytes(path, png_bytes(arr_u8))
