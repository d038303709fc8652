"""Procedural base images and snippet masks for synthesized corpora.

A base image is a mosaic of three texture zones, so snippets can be drawn
from smooth, rough or structured content:

* smooth:    slow colour gradient with faint 1/f texture
* rough:     strong 1/f texture (foliage/gravel-like)
* structure: brick pattern with mortar lines and per-brick tint

Every pixel also receives mild sensor noise before 8-bit quantization, so
no two natural blocks are bit-identical.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

CATEGORIES = ("smooth", "rough", "structure")


def fractal_noise(rng: np.random.Generator, h: int, w: int, beta: float = 1.0) -> np.ndarray:
    """Zero-mean, unit-std noise with a 1/f**beta amplitude spectrum."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f = np.hypot(fx, fy)
    f[0, 0] = 1.0
    amp = f ** -beta
    amp[0, 0] = 0.0
    spec = amp * (rng.standard_normal((h, w // 2 + 1)) + 1j * rng.standard_normal((h, w // 2 + 1)))
    out = np.fft.irfft2(spec, s=(h, w))
    return (out - out.mean()) / (out.std() + 1e-12)


def zone_map(rng: np.random.Generator, h: int, w: int, n_seeds: int = 6) -> np.ndarray:
    """Voronoi partition into category indices 0..2 (each used at least twice)."""
    pts = rng.uniform([0, 0], [w, h], size=(n_seeds, 2))
    cats = np.arange(n_seeds) % len(CATEGORIES)
    yy, xx = np.mgrid[0:h, 0:w]
    # low-frequency warp keeps the zone borders from being straight lines
    warp = 25.0 * fractal_noise(rng, h, w, 2.0)
    d = (xx[None] + warp[None] - pts[:, 0, None, None]) ** 2 + (yy[None] - pts[:, 1, None, None]) ** 2
    return cats[np.argmin(d, axis=0)]


def _bricks(rng, h, w):
    bh = int(rng.integers(18, 28))
    bw = int(rng.integers(40, 64))
    yy, xx = np.mgrid[0:h, 0:w]
    row = yy // bh
    xs = xx + (row % 2) * (bw // 2)
    col = xs // bw
    tint = rng.uniform(-0.12, 0.12, size=(h // bh + 2, w // bw + 3))
    val = 0.55 + tint[row, col]
    mortar = ((yy % bh) < 2) | ((xs % bw) < 2)
    return np.where(mortar, 0.85, val)


def base_image(seed: int, h: int = 512, w: int = 512, sensor_sigma: float = 1.5 / 255
               ) -> tuple[np.ndarray, np.ndarray]:
    """(rgb image quantized to 8-bit levels, zone index map)."""
    rng = np.random.default_rng(seed)
    zones = zone_map(rng, h, w)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    lum = np.empty((h, w))
    gx, gy = rng.uniform(-0.3, 0.3, size=2)
    smooth = 0.5 + gx * (xx - 0.5) + gy * (yy - 0.5) + 0.03 * fractal_noise(rng, h, w, 1.6)
    rough = 0.5 + 0.16 * fractal_noise(rng, h, w, 0.9)
    struct = _bricks(rng, h, w) + 0.04 * fractal_noise(rng, h, w, 1.2)
    layers = np.stack([smooth, rough, struct])
    onehot = np.stack([(zones == k).astype(float) for k in range(3)])
    # soften zone borders over a few pixels
    onehot = np.stack([ndimage.gaussian_filter(m, 1.5) for m in onehot])
    onehot /= onehot.sum(axis=0, keepdims=True)
    lum = (layers * onehot).sum(axis=0)
    tint = np.stack([0.06 * fractal_noise(rng, h, w, 2.0) for _ in range(3)], axis=2)
    tint += rng.uniform(-0.08, 0.08, size=3)
    rgb = lum[..., None] + tint
    rgb = rgb + rng.normal(0.0, sensor_sigma, size=rgb.shape)
    rgb = np.clip(np.rint(np.clip(rgb, 0, 1) * 255.0), 0, 255) / 255.0
    return rgb, zones


def blob_alpha(rng: np.random.Generator, size: int, margin: float = 2.0) -> np.ndarray:
    """Anti-aliased star-convex blob filling most of a size x size square.

    Alpha is quantized to 8-bit levels so it survives PNG round trips.
    """
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    rho = np.hypot(xx - c, yy - c)
    th = np.arctan2(yy - c, xx - c)
    a1, a2 = rng.uniform(0.0, 0.12, size=2)
    p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
    shape = 1.0 + a1 * np.cos(th + p1) + a2 * np.cos(2 * th + p2)
    radius = (c - margin) / (1.0 + a1 + a2)
    alpha = np.clip(radius * shape - rho + 0.5, 0.0, 1.0)
    return np.rint(alpha * 255.0) / 255.0


def find_anchor(rng: np.random.Generator, zones: np.ndarray, category: str, size: int,
                purity: float = 0.9, attempts: int = 2000) -> tuple[int, int]:
    """Top-left (x, y) of a size x size window lying mostly in one zone."""
    h, w = zones.shape
    k = CATEGORIES.index(category)
    best, best_frac = None, -1.0
    for _ in range(attempts):
        x = int(rng.integers(0, w - size + 1))
        y = int(rng.integers(0, h - size + 1))
        frac = float(np.mean(zones[y:y + size, x:x + size] == k))
        if frac >= purity:
            return x, y
        if frac > best_frac:
            best, best_frac = (x, y), frac
    return best
