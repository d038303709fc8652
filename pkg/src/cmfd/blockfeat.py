"""Overlapping-block tiling and block feature sets.

Every method maps each ``b x b`` block (unit stride, row-major order) to one
feature row. The kernels are written so that two blocks with identical pixel
content produce bit-identical rows wherever they sit in the image: each block
is processed by the same sequence of floating point operations, and no BLAS
call is used on per-block data (OpenBLAS tiling makes results depend on the
row position inside the matrix).

Feature definitions
-------------------
dct      orthonormal 2-D DCT-II, coefficients in JPEG zig-zag order (256)
dwt      full 2-D Haar decomposition, orthonormal; order LL_L, LH_L, HL_L, HH_L,
         LH_{L-1}, ..., HH_1 (coarse to fine). LH = lowpass along x, highpass
         along y. (256)
fmt      |DFT| (orthonormal, periodic) sampled on a log-polar grid with
         bilinear interpolation: radius 0 plus 44 radii log-spaced in
         [1.5, b/2], 32 angles in [0, pi); summed over angles (45)
zernike  |A_nm| for n <= 5, m >= 0, n - m even, unit disk of radius b/2
         inscribed in the block, pixel centres at (i + .5, j + .5) (12)
blur     Flusser's blur invariants C(p, q), p + q odd, 0 <= p, q <= 7:
         orders 3, 5, 7 and the six order-9 pairs with p, q <= 7 (24)
hu       Hu's phi_1 .. phi_4 from normalized central moments (4). Some
         tables list 5 Hu features; the first four are used here.
pca      projection onto the leading principal axes of all block vectors of
         the image; dimension = smallest d reaching 96% cumulative variance
svd      the b singular values, descending (16)
kpca     Gaussian-kernel PCA on [0, 1] intensities (the scale is a knob), M
         seeded anchor blocks, sigma 60, double-centred kernel; all M axes
         kept (192)
luo      rgb channel means, then the gray-mass ratios of the top half, the
         left half, the upper-left triangle (i + j < b - 1) and the
         upper-right triangle (j > i); pixels on the splitting diagonal count
         with weight 1/2 so each triangle holds exactly b^2 / 2 (7)
bravo    rgb channel means and the Shannon entropy (bits) of the 256-bin
         histogram of round(255 * gray) (4)
lin      block mean, the four quadrant means (TL, TR, BL, BR) and the four
         half means (top, bottom, left, right) (9)
circle   means of 8 annuli k <= r < k + 1 around the centre of a 17x17 block (8)

``zernike``, ``hu`` and ``circle`` first rotate each block by the multiple of
90 degrees that makes its pixel sequence lexicographically smallest; the
features are invariant to such rotations mathematically and this makes the
invariance exact in floating point as well.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .imgio import ImageError, check_gray, check_rgb, to_grayscale

BLOCK_METHODS = ("blur", "hu", "zernike", "pca", "svd", "kpca", "luo", "bravo",
                 "lin", "circle", "dct", "dwt", "fmt")

# fixed descriptor lengths; pca depends on the image
FEATURE_DIMS = {"blur": 24, "hu": 4, "zernike": 12, "svd": 16, "kpca": 192, "luo": 7,
                "bravo": 4, "lin": 9, "circle": 8, "dct": 256, "dwt": 256, "fmt": 45}

DEFAULT_BLOCK_SIZE = {m: 16 for m in BLOCK_METHODS}
DEFAULT_BLOCK_SIZE["circle"] = 17

COLOR_METHODS = ("luo", "bravo")

FMT_RADII = 45
FMT_ANGLES = 32
CIRCLE_RINGS = 8
PCA_VARIANCE = 0.96
KPCA_ANCHORS = 192
KPCA_SIGMA = 60.0
# intensity scale of the kernel input: on 0..255 a width of 60 saturates the
# Gaussian for textured 16x16 blocks and their rows collapse to one vector
KPCA_SCALE = 1.0


@dataclass
class FeatureMatrix:
    """Descriptor rows plus the (x, y) image position each row describes.

    For block methods ``coords`` holds block centres ``origin + (b - 1) / 2``;
    for keypoints, the keypoint location.
    """

    method: str
    rows: np.ndarray
    coords: np.ndarray
    block_size: int | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.rows = np.asarray(self.rows)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        if self.rows.ndim != 2 or len(self.rows) != len(self.coords):
            raise ValueError(f"rows {self.rows.shape} and coords {self.coords.shape} disagree")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class BlockGrid:
    block_size: int
    height: int
    width: int

    @property
    def nx(self) -> int:
        return self.width - self.block_size + 1

    @property
    def ny(self) -> int:
        return self.height - self.block_size + 1

    def __len__(self) -> int:
        return self.nx * self.ny

    def origins(self) -> np.ndarray:
        """Top-left (x, y) of every block, row-major."""
        ys, xs = np.divmod(np.arange(len(self)), self.nx)
        return np.stack([xs, ys], axis=1)

    def centers(self) -> np.ndarray:
        return self.origins() + (self.block_size - 1) / 2.0


def tile(img: np.ndarray, b: int) -> BlockGrid:
    h, w = np.shape(img)[:2]
    if b < 1 or h < b or w < b:
        raise ImageError(f"image {h}x{w} is smaller than block size {b}")
    return BlockGrid(int(b), int(h), int(w))


# ---------------------------------------------------------------- helpers

@njit(cache=True)
def _load_block(img, y0, x0, b, canon, buf):
    """Copy a block into ``buf`` (b*b), optionally rotation-canonicalized."""
    if not canon:
        for i in range(b):
            for j in range(b):
                buf[i * b + j] = img[y0 + i, x0 + j]
        return
    best = 0
    for r in range(1, 4):
        # compare rotation r against the current best, pixel by pixel
        decided = False
        for i in range(b):
            for j in range(b):
                if r == 1:
                    a = img[y0 + j, x0 + b - 1 - i]
                elif r == 2:
                    a = img[y0 + b - 1 - i, x0 + b - 1 - j]
                else:
                    a = img[y0 + b - 1 - j, x0 + i]
                if best == 0:
                    c = img[y0 + i, x0 + j]
                elif best == 1:
                    c = img[y0 + j, x0 + b - 1 - i]
                elif best == 2:
                    c = img[y0 + b - 1 - i, x0 + b - 1 - j]
                else:
                    c = img[y0 + b - 1 - j, x0 + i]
                if a != c:
                    if a < c:
                        best = r
                    decided = True
                    break
            if decided:
                break
    for i in range(b):
        for j in range(b):
            if best == 0:
                v = img[y0 + i, x0 + j]
            elif best == 1:
                v = img[y0 + j, x0 + b - 1 - i]
            elif best == 2:
                v = img[y0 + b - 1 - i, x0 + b - 1 - j]
            else:
                v = img[y0 + b - 1 - j, x0 + i]
            buf[i * b + j] = v


GROUP = 4  # blocks sharing one pass over the weights


@njit(cache=True, fastmath=True)
def _project_kernel(img, b, weights_t, mean, canon, out):
    """out[row] = (block - mean) @ weights for every block (weights given transposed).

    Four blocks share each pass over a weight vector. The summation order
    depends only on b, so a block's row does not depend on its position.
    """
    h, w = img.shape
    nx = w - b + 1
    ny = h - b + 1
    d = weights_t.shape[0]
    n = b * b
    buf = np.zeros((GROUP, n))
    b0 = buf[0]
    b1 = buf[1]
    b2 = buf[2]
    b3 = buf[3]
    for y0 in range(ny):
        for gx in range(0, nx, GROUP):
            g_n = min(GROUP, nx - gx)
            for g in range(g_n):
                _load_block(img, y0, gx + g, b, canon, buf[g])
                for k in range(n):
                    buf[g, k] -= mean[k]
            row = y0 * nx + gx
            for j in range(d):
                wj = weights_t[j]
                s0 = 0.0
                s1 = 0.0
                s2 = 0.0
                s3 = 0.0
                for k in range(n):
                    wk = wj[k]
                    s0 += b0[k] * wk
                    s1 += b1[k] * wk
                    s2 += b2[k] * wk
                    s3 += b3[k] * wk
                out[row, j] = s0
                if g_n > 1:
                    out[row + 1, j] = s1
                if g_n > 2:
                    out[row + 2, j] = s2
                if g_n > 3:
                    out[row + 3, j] = s3


def _run_projection(gray, b, weights, mean=None, canon=False, dtype=np.float64):
    grid = tile(gray, b)
    weights_t = np.ascontiguousarray(np.asarray(weights, dtype=np.float64).T)
    if mean is None:
        mean = np.zeros(b * b)
    out = np.empty((len(grid), weights_t.shape[0]), dtype=dtype)
    _project_kernel(np.ascontiguousarray(gray, dtype=np.float64), b, weights_t,
                    np.ascontiguousarray(mean, dtype=np.float64), canon, out)
    return out


# ---------------------------------------------------------------- DCT

def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix C with C[u, x]."""
    u = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    c = np.cos(np.pi * (2 * x + 1) * u / (2 * n)) * np.sqrt(2.0 / n)
    c[0] /= np.sqrt(2.0)
    return c


def zigzag_order(n: int) -> np.ndarray:
    """Flat (row-major) indices of an n x n array in JPEG zig-zag order."""
    cells = [(v, u) for v in range(n) for u in range(n)]
    cells.sort(key=lambda vu: (vu[0] + vu[1], vu[0] if (vu[0] + vu[1]) % 2 else vu[1]))
    return np.array([v * n + u for v, u in cells], dtype=np.int64)


@njit(cache=True)
def _dct_kernel(img, b, c, order, out):
    h, w = img.shape
    nx = w - b + 1
    ny = h - b + 1
    # 1-D DCT of every horizontal window, shared by all blocks covering it
    rows = np.empty((h, nx, b))
    for y in range(h):
        for x0 in range(nx):
            for u in range(b):
                acc = 0.0
                for j in range(b):
                    acc += c[u, j] * img[y, x0 + j]
                rows[y, x0, u] = acc
    coef = np.empty(b * b)
    row = 0
    for y0 in range(ny):
        for x0 in range(nx):
            for v in range(b):
                for u in range(b):
                    acc = 0.0
                    for i in range(b):
                        acc += c[v, i] * rows[y0 + i, x0, u]
                    coef[v * b + u] = acc
            for k in range(b * b):
                out[row, k] = coef[order[k]]
            row += 1


def _dct_rows(gray, b, dtype):
    grid = tile(gray, b)
    out = np.empty((len(grid), b * b), dtype=dtype)
    _dct_kernel(np.ascontiguousarray(gray, np.float64), b, dct_matrix(b), zigzag_order(b), out)
    return out


# ---------------------------------------------------------------- DWT

@njit(cache=True)
def _haar_block(img, y0, x0, b, buf, tmp, coef):
    for i in range(b):
        for j in range(b):
            buf[i, j] = img[y0 + i, x0 + j]
    n = b
    while n > 1:
        m = n // 2
        start = m * m
        for i in range(m):
            for j in range(m):
                p00 = buf[2 * i, 2 * j]
                p01 = buf[2 * i, 2 * j + 1]
                p10 = buf[2 * i + 1, 2 * j]
                p11 = buf[2 * i + 1, 2 * j + 1]
                k = i * m + j
                tmp[i, j] = (p00 + p01 + p10 + p11) * 0.5
                coef[start + k] = (p00 + p01 - p10 - p11) * 0.5  # LH
                coef[start + m * m + k] = (p00 - p01 + p10 - p11) * 0.5  # HL
                coef[start + 2 * m * m + k] = (p00 - p01 - p10 + p11) * 0.5  # HH
        for i in range(m):
            for j in range(m):
                buf[i, j] = tmp[i, j]
        n = m
    coef[0] = buf[0, 0]


@njit(cache=True)
def _dwt_kernel(img, b, out):
    h, w = img.shape
    nx = w - b + 1
    ny = h - b + 1
    buf = np.empty((b, b))
    tmp = np.empty((b, b))
    coef = np.empty(b * b)
    row = 0
    for y0 in range(ny):
        for x0 in range(nx):
            _haar_block(img, y0, x0, b, buf, tmp, coef)
            for k in range(b * b):
                out[row, k] = coef[k]
            row += 1


def _check_pow2(b):
    if b < 2 or b & (b - 1):
        raise ValueError(f"dwt needs a power-of-two block size, got {b}")


def _dwt_rows(gray, b, dtype):
    _check_pow2(b)
    grid = tile(gray, b)
    out = np.empty((len(grid), b * b), dtype=dtype)
    _dwt_kernel(np.ascontiguousarray(gray, np.float64), b, out)
    return out


# ---------------------------------------------------------------- FMT

def fmt_radii(b: int) -> np.ndarray:
    return np.concatenate([[0.0], np.geomspace(1.5, b / 2.0, FMT_RADII - 1)])


def fmt_weights(b: int) -> np.ndarray:
    """(b*b, 45) matrix folding log-polar bilinear sampling and the angle sum."""
    wts = np.zeros((b * b, FMT_RADII))
    thetas = np.pi * np.arange(FMT_ANGLES) / FMT_ANGLES
    for k, r in enumerate(fmt_radii(b)):
        for th in thetas:
            u = r * np.cos(th)
            v = r * np.sin(th)
            u0 = math.floor(u)
            v0 = math.floor(v)
            fu = u - u0
            fv = v - v0
            for du, wu in ((0, 1 - fu), (1, fu)):
                for dv, wv in ((0, 1 - fv), (1, fv)):
                    if wu * wv == 0.0:
                        continue
                    idx = ((v0 + dv) % b) * b + (u0 + du) % b
                    wts[idx, k] += wu * wv
    return wts


@njit(cache=True)
def _fmt_kernel(img, b, weights, out):
    h, w = img.shape
    nx = w - b + 1
    ny = h - b + 1
    cos_t = np.empty((b, b))
    sin_t = np.empty((b, b))
    scale = 1.0 / np.sqrt(b)
    for u in range(b):
        for j in range(b):
            ang = 2.0 * np.pi * ((u * j) % b) / b
            cos_t[u, j] = np.cos(ang) * scale
            sin_t[u, j] = -np.sin(ang) * scale
    # row DFT of every horizontal window
    rre = np.empty((h, nx, b))
    rim = np.empty((h, nx, b))
    for y in range(h):
        for x0 in range(nx):
            for u in range(b):
                ar = 0.0
                ai = 0.0
                for j in range(b):
                    p = img[y, x0 + j]
                    ar += cos_t[u, j] * p
                    ai += sin_t[u, j] * p
                rre[y, x0, u] = ar
                rim[y, x0, u] = ai
    d = weights.shape[1]
    mag = np.empty(b * b)
    acc = np.empty(d)
    row = 0
    for y0 in range(ny):
        for x0 in range(nx):
            for v in range(b):
                for u in range(b):
                    ar = 0.0
                    ai = 0.0
                    for i in range(b):
                        xr = rre[y0 + i, x0, u]
                        xi = rim[y0 + i, x0, u]
                        cr = cos_t[v, i]
                        ci = sin_t[v, i]
                        ar += cr * xr - ci * xi
                        ai += cr * xi + ci * xr
                    mag[v * b + u] = np.sqrt(ar * ar + ai * ai)
            acc[:] = 0.0
            for k in range(b * b):
                m = mag[k]
                if m == 0.0:
                    continue
                for j in range(d):
                    acc[j] += m * weights[k, j]
            for j in range(d):
                out[row, j] = acc[j]
            row += 1


def _fmt_rows(gray, b, dtype):
    grid = tile(gray, b)
    out = np.empty((len(grid), FMT_RADII), dtype=dtype)
    _fmt_kernel(np.ascontiguousarray(gray, np.float64), b, fmt_weights(b), out)
    return out


# ---------------------------------------------------------------- Zernike

ZERNIKE_ORDERS = [(n, m) for n in range(6) for m in range(n + 1) if (n - m) % 2 == 0]


def zernike_radial(n: int, m: int, rho: np.ndarray) -> np.ndarray:
    out = np.zeros_like(rho)
    for s in range((n - m) // 2 + 1):
        c = ((-1) ** s * math.factorial(n - s)
             / (math.factorial(s) * math.factorial((n + m) // 2 - s)
                * math.factorial((n - m) // 2 - s)))
        out += c * rho ** (n - 2 * s)
    return out


def zernike_weights(b: int) -> np.ndarray:
    """(b*b, 24) real and imaginary parts of (n+1)/pi * conj(V_nm) * dA."""
    rad = b / 2.0
    c = (np.arange(b) + 0.5 - rad) / rad
    x = np.broadcast_to(c[None, :], (b, b))
    y = np.broadcast_to(c[:, None], (b, b))
    rho = np.hypot(x, y)
    theta = np.arctan2(y, x)
    inside = rho <= 1.0
    da = (1.0 / rad) ** 2
    cols = []
    for n, m in ZERNIKE_ORDERS:
        r = zernike_radial(n, m, rho) * inside * (n + 1) / np.pi * da
        cols.append((r * np.cos(m * theta)).ravel())
        cols.append((-r * np.sin(m * theta)).ravel())
    return np.stack(cols, axis=1)


def _zernike_rows(gray, b, dtype):
    parts = _run_projection(gray, b, zernike_weights(b), canon=True)
    mag = np.sqrt(parts[:, 0::2] ** 2 + parts[:, 1::2] ** 2)
    return mag.astype(dtype)


# ---------------------------------------------------------------- moments

BLUR_INDICES = ([(p, 3 - p) for p in range(4)] + [(p, 5 - p) for p in range(6)]
                + [(p, 7 - p) for p in range(8)] + [(p, 9 - p) for p in range(2, 8)])
_BLUR_MAX = 7


def _binom_table(n):
    t = np.zeros((n + 1, n + 1))
    for i in range(n + 1):
        for j in range(i + 1):
            t[i, j] = math.comb(i, j)
    return t


@njit(cache=True)
def _central_moments(buf, b, scale, mu):
    pmax = mu.shape[0]
    m00 = 0.0
    sx = 0.0
    sy = 0.0
    for i in range(b):
        for j in range(b):
            f = buf[i * b + j]
            m00 += f
            sx += f * j
            sy += f * i
    mu[:, :] = 0.0
    if m00 <= 0.0:
        return m00
    cx = sx / m00
    cy = sy / m00
    px = np.empty(pmax)
    py = np.empty(pmax)
    for i in range(b):
        yy = (i - cy) * scale
        py[0] = 1.0
        for p in range(1, pmax):
            py[p] = py[p - 1] * yy
        for j in range(b):
            f = buf[i * b + j]
            if f == 0.0:
                continue
            xx = (j - cx) * scale
            px[0] = f
            for p in range(1, pmax):
                px[p] = px[p - 1] * xx
            for p in range(pmax):
                for q in range(pmax):
                    mu[p, q] += px[p] * py[q]
    return m00


@njit(cache=True)
def _blur_kernel(img, b, idx, binom, out):
    h, w = img.shape
    nx = w - b + 1
    ny = h - b + 1
    pm = _BLUR_MAX + 1
    buf = np.empty(b * b)
    mu = np.empty((pm, pm))
    cc = np.empty((pm, pm))
    scale = 2.0 / (b - 1) if b > 1 else 1.0
    row = 0
    for y0 in range(ny):
        for x0 in range(nx):
            _load_block(img, y0, x0, b, False, buf)
            m00 = _central_moments(buf, b, scale, mu)
            if m00 <= 1e-12:
                for k in range(idx.shape[0]):
                    out[row, k] = 0.0
                row += 1
                continue
            cc[:, :] = 0.0
            for order in range(3, 10, 2):
                for p in range(max(0, order - _BLUR_MAX), min(order, _BLUR_MAX) + 1):
                    q = order - p
                    s = 0.0
                    for n in range(p + 1):
                        for m in range(q + 1):
                            if n + m == 0 or n + m == order or (n + m) % 2 == 1:
                                continue
                            s += binom[p, n] * binom[q, m] * cc[p - n, q - m] * mu[n, m]
                    cc[p, q] = mu[p, q] - s / m00
            for k in range(idx.shape[0]):
                out[row, k] = cc[idx[k, 0], idx[k, 1]]
            row += 1


def _blur_rows(gray, b, dtype):
    grid = tile(gray, b)
    idx = np.array(BLUR_INDICES, dtype=np.int64)
    out = np.empty((len(grid), len(idx)), dtype=dtype)
    _blur_kernel(np.ascontiguousarray(gray, np.float64), b, idx, _binom_table(_BLUR_MAX), out)
    return out


@njit(cache=True)
def _hu_kernel(img, b, out):
    h, w = img.shape
    nx = w - b + 1
    ny = h - b + 1
    buf = np.empty(b * b)
    mu = np.empty((4, 4))
    row = 0
    for y0 in range(ny):
        for x0 in range(nx):
            _load_block(img, y0, x0, b, True, buf)
            m00 = _central_moments(buf, b, 1.0, mu)
            if m00 <= 1e-12:
                for k in range(4):
                    out[row, k] = 0.0
                row += 1
                continue
            n20 = mu[2, 0] / m00 ** 2
            n02 = mu[0, 2] / m00 ** 2
            n11 = mu[1, 1] / m00 ** 2
            s3 = m00 ** 2.5
            n30 = mu[3, 0] / s3
            n03 = mu[0, 3] / s3
            n21 = mu[2, 1] / s3
            n12 = mu[1, 2] / s3
            out[row, 0] = n20 + n02
            out[row, 1] = (n20 - n02) ** 2 + 4.0 * n11 ** 2
            out[row, 2] = (n30 - 3.0 * n12) ** 2 + (3.0 * n21 - n03) ** 2
            out[row, 3] = (n30 + n12) ** 2 + (n21 + n03) ** 2
            row += 1


def _hu_rows(gray, b, dtype):
    grid = tile(gray, b)
    out = np.empty((len(grid), 4), dtype=dtype)
    _hu_kernel(np.ascontiguousarray(gray, np.float64), b, out)
    return out


# ---------------------------------------------------------------- SVD

def _svd_rows(gray, b, dtype):
    grid = tile(gray, b)
    out = np.empty((len(grid), b), dtype=dtype)
    at = 0
    # the gufunc runs one LAPACK call per matrix, so rows do not depend on batch position
    for chunk in _block_chunks(np.ascontiguousarray(gray, np.float64), b, 16):
        mats = chunk.reshape(-1, b, b)
        out[at:at + len(mats)] = np.linalg.svd(mats, compute_uv=False)
        at += len(mats)
    return out


# ---------------------------------------------------------------- mean-based

@njit(cache=True)
def _lin_kernel(img, b, out):
    h, w = img.shape
    nx = w - b + 1
    ny = h - b + 1
    hb = b // 2
    row = 0
    for y0 in range(ny):
        for x0 in range(nx):
            q = np.zeros(4)  # TL, TR, BL, BR
            for i in range(b):
                for j in range(b):
                    k = (2 if i >= hb else 0) + (1 if j >= hb else 0)
                    q[k] += img[y0 + i, x0 + j]
            nq = hb * hb
            top = q[0] + q[1]
            bot = q[2] + q[3]
            left = q[0] + q[2]
            right = q[1] + q[3]
            half = hb * b
            out[row, 0] = (top + bot) / (b * b)
            out[row, 1] = q[0] / nq
            out[row, 2] = q[1] / nq
            out[row, 3] = q[2] / nq
            out[row, 4] = q[3] / nq
            out[row, 5] = top / half
            out[row, 6] = bot / half
            out[row, 7] = left / half
            out[row, 8] = right / half
            row += 1


def _lin_rows(gray, b, dtype):
    if b % 2:
        raise ValueError(f"lin needs an even block size, got {b}")
    grid = tile(gray, b)
    out = np.empty((len(grid), 9), dtype=dtype)
    _lin_kernel(np.ascontiguousarray(gray, np.float64), b, out)
    return out


@njit(cache=True)
def _luo_kernel(rgb, gray, b, out):
    h, w = gray.shape
    nx = w - b + 1
    ny = h - b + 1
    hb = b // 2
    n = b * b
    row = 0
    for y0 in range(ny):
        for x0 in range(nx):
            cr = 0.0
            cg = 0.0
            cb = 0.0
            tot = 0.0
            top = 0.0
            left = 0.0
            ul = 0.0
            ur = 0.0
            for i in range(b):
                for j in range(b):
                    cr += rgb[y0 + i, x0 + j, 0]
                    cg += rgb[y0 + i, x0 + j, 1]
                    cb += rgb[y0 + i, x0 + j, 2]
                    g = gray[y0 + i, x0 + j]
                    tot += g
                    if i < hb:
                        top += g
                    if j < hb:
                        left += g
                    if i + j < b - 1:
                        ul += g
                    elif i + j == b - 1:
                        ul += 0.5 * g
                    if j > i:
                        ur += g
                    elif j == i:
                        ur += 0.5 * g
            out[row, 0] = cr / n
            out[row, 1] = cg / n
            out[row, 2] = cb / n
            if tot > 0.0:
                out[row, 3] = top / tot
                out[row, 4] = left / tot
                out[row, 5] = ul / tot
                out[row, 6] = ur / tot
            else:
                for k in range(3, 7):
                    out[row, k] = 0.5
            row += 1


@njit(cache=True)
def _bravo_kernel(rgb, levels, b, out):
    h, w = levels.shape
    nx = w - b + 1
    ny = h - b + 1
    n = b * b
    hist = np.zeros(256, np.int64)
    row = 0
    for y0 in range(ny):
        for x0 in range(nx):
            cr = 0.0
            cg = 0.0
            cb = 0.0
            for i in range(b):
                for j in range(b):
                    cr += rgb[y0 + i, x0 + j, 0]
                    cg += rgb[y0 + i, x0 + j, 1]
                    cb += rgb[y0 + i, x0 + j, 2]
                    hist[levels[y0 + i, x0 + j]] += 1
            ent = 0.0
            for k in range(256):
                c = hist[k]
                if c > 0:
                    p = c / n
                    ent -= p * np.log2(p)
                hist[k] = 0
            out[row, 0] = cr / n
            out[row, 1] = cg / n
            out[row, 2] = cb / n
            out[row, 3] = ent
            row += 1


def gray_levels(gray: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(gray) * 255.0), 0, 255).astype(np.int64)


def circle_masks(b: int) -> np.ndarray:
    """(b*b, 8) averaging weights of the annuli k <= r < k + 1."""
    c = (b - 1) / 2.0
    yy, xx = np.mgrid[0:b, 0:b]
    r = np.hypot(xx - c, yy - c).ravel()
    wts = np.zeros((b * b, CIRCLE_RINGS))
    for k in range(CIRCLE_RINGS):
        sel = (r >= k) & (r < k + 1)
        if sel.any():
            wts[sel, k] = 1.0 / sel.sum()
    return wts


def _circle_rows(gray, b, dtype):
    if b % 2 == 0:
        raise ValueError(f"circle needs an odd block size, got {b}")
    return _run_projection(gray, b, circle_masks(b), canon=True, dtype=dtype)


# ---------------------------------------------------------------- PCA

@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # (D,)
    axes: np.ndarray  # (D, d)
    explained: np.ndarray  # eigenvalues, descending, all D

    @property
    def dim(self) -> int:
        return self.axes.shape[1]


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def pca_from_moments(total: np.ndarray, outer: np.ndarray, count: int,
                     variance: float = PCA_VARIANCE) -> PcaModel:
    mean = total / count
    cov = outer / count - np.outer(mean, mean)
    cov = (cov + cov.T) / 2.0
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals[::-1], 0.0, None)
    evecs = _fix_signs(evecs[:, ::-1])
    tot = evals.sum()
    if tot <= 1e-15 * max(1.0, float(np.abs(mean).max())):
        return PcaModel(mean, np.zeros((len(mean), 1)), evals)
    cum = np.cumsum(evals) / tot
    d = int(np.searchsorted(cum, variance - 1e-12) + 1)
    return PcaModel(mean, evecs[:, :d], evals)


def pca_fit(vectors: np.ndarray, variance: float = PCA_VARIANCE) -> PcaModel:
    x = np.asarray(vectors, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("pca needs at least 2 vectors")
    return pca_from_moments(x.sum(axis=0), x.T @ x, len(x), variance)


def _block_chunks(gray, b, chunk_rows=64):
    """Yield (n, b*b) block matrices, a band of block rows at a time."""
    win = np.lib.stride_tricks.sliding_window_view(gray, (b, b))
    ny = win.shape[0]
    for y in range(0, ny, chunk_rows):
        part = win[y:y + chunk_rows]
        yield part.reshape(-1, b * b)


def pca_fit_image(gray: np.ndarray, b: int, variance: float = PCA_VARIANCE) -> PcaModel:
    tile(gray, b)
    gray = np.ascontiguousarray(gray, dtype=np.float64)
    # centre on the image mean first so the second-moment sum stays well conditioned
    shift = float(gray.mean())
    total = np.zeros(b * b)
    outer = np.zeros((b * b, b * b))
    count = 0
    for x in _block_chunks(gray - shift, b):
        total += x.sum(axis=0)
        outer += x.T @ x
        count += len(x)
    if count < 2:
        raise ValueError("pca needs at least 2 blocks")
    model = pca_from_moments(total, outer, count, variance)
    return PcaModel(model.mean + shift, model.axes, model.explained)


def feat_pca(gray: np.ndarray, b: int = 16, variance: float = PCA_VARIANCE,
             dtype=np.float64) -> FeatureMatrix:
    gray = check_gray(gray)
    model = pca_fit_image(gray, b, variance)
    rows = _run_projection(gray, b, model.axes, model.mean, dtype=dtype)
    return FeatureMatrix("pca", rows, tile(gray, b).centers(), b,
                         extra={"pca_dim": model.dim})


# ---------------------------------------------------------------- KPCA

@dataclass(frozen=True)
class KpcaModel:
    anchors: np.ndarray  # (M, D) on the kernel input scale
    sigma: float
    alphas: np.ndarray  # (M, M) scaled eigenvectors, columns by descending eigenvalue
    col_mean: np.ndarray  # (M,) column means of the anchor kernel matrix
    total_mean: float


def kpca_fit(anchors: np.ndarray, sigma: float = KPCA_SIGMA) -> KpcaModel:
    a = np.asarray(anchors, dtype=np.float64)
    sq = ((a[:, None, :] - a[None, :, :]) ** 2).sum(axis=2)
    k = np.exp(-sq / (2.0 * sigma * sigma))
    col = k.mean(axis=0)
    tot = float(k.mean())
    kc = k - col[None, :] - col[:, None] + tot
    kc = (kc + kc.T) / 2.0
    evals, evecs = np.linalg.eigh(kc)
    evals = evals[::-1]
    evecs = _fix_signs(evecs[:, ::-1])
    floor = max(float(evals[0]), 0.0) * 1e-10
    scale = np.where(evals > floor, 1.0 / np.sqrt(np.where(evals > floor, evals, 1.0)), 0.0)
    return KpcaModel(a, float(sigma), evecs * scale[None, :], col, tot)


def kpca_transform(model: KpcaModel, vectors: np.ndarray) -> np.ndarray:
    """Reference projection of arbitrary vectors (kernel input scale)."""
    x = np.asarray(vectors, dtype=np.float64)
    sq = ((x[:, None, :] - model.anchors[None, :, :]) ** 2).sum(axis=2)
    k = np.exp(-sq / (2.0 * model.sigma ** 2))
    kc = k - model.col_mean[None, :] - k.mean(axis=1, keepdims=True) + model.total_mean
    return kc @ model.alphas


@njit(cache=True, fastmath=True)
def _kpca_kernel(img, b, anchors, inv2s2, alphas_t, col_mean, total_mean, out):
    """Centred kernel rows times the scaled eigenvectors, four blocks at a time.

    Squared distances accumulate in float32. Summation orders depend only on
    b and the anchor count, so a block's row does not depend on its position.
    """
    h, w = img.shape
    nx = w - b + 1
    ny = h - b + 1
    n = b * b
    m = anchors.shape[0]
    d = alphas_t.shape[0]
    buf = np.zeros((GROUP, n), np.float32)
    cen = np.zeros((GROUP, m))
    b0, b1, b2, b3 = buf[0], buf[1], buf[2], buf[3]
    c0, c1, c2, c3 = cen[0], cen[1], cen[2], cen[3]
    for y0 in range(ny):
        for gx in range(0, nx, GROUP):
            g_n = min(GROUP, nx - gx)
            for g in range(g_n):
                for i in range(b):
                    for j in range(b):
                        buf[g, i * b + j] = np.float32(img[y0 + i, gx + g + j])
            for a in range(m):
                an = anchors[a]
                s0 = np.float32(0.0)
                s1 = np.float32(0.0)
                s2 = np.float32(0.0)
                s3 = np.float32(0.0)
                for k in range(n):
                    v = an[k]
                    e0 = b0[k] - v
                    e1 = b1[k] - v
                    e2 = b2[k] - v
                    e3 = b3[k] - v
                    s0 += e0 * e0
                    s1 += e1 * e1
                    s2 += e2 * e2
                    s3 += e3 * e3
                c0[a] = np.exp(-np.float64(s0) * inv2s2)
                c1[a] = np.exp(-np.float64(s1) * inv2s2)
                c2[a] = np.exp(-np.float64(s2) * inv2s2)
                c3[a] = np.exp(-np.float64(s3) * inv2s2)
            for g in range(GROUP):
                kmean = 0.0
                for a in range(m):
                    kmean += cen[g, a]
                kmean /= m
                for a in range(m):
                    cen[g, a] = cen[g, a] - col_mean[a] - kmean + total_mean
            row = y0 * nx + gx
            for j in range(d):
                al = alphas_t[j]
                s0 = 0.0
                s1 = 0.0
                s2 = 0.0
                s3 = 0.0
                for a in range(m):
                    v = al[a]
                    s0 += c0[a] * v
                    s1 += c1[a] * v
                    s2 += c2[a] * v
                    s3 += c3[a] * v
                out[row, j] = s0
                if g_n > 1:
                    out[row + 1, j] = s1
                if g_n > 2:
                    out[row + 2, j] = s2
                if g_n > 3:
                    out[row + 3, j] = s3


def kpca_sample_anchors(n_blocks: int, m: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    m = min(m, n_blocks)
    return np.sort(rng.choice(n_blocks, size=m, replace=False))


def feat_kpca(gray: np.ndarray, b: int = 16, m: int = KPCA_ANCHORS, sigma: float = KPCA_SIGMA,
              seed: int = 0, dtype=np.float64, scale: float = KPCA_SCALE) -> FeatureMatrix:
    gray = check_gray(gray)
    grid = tile(gray, b)
    scaled = np.ascontiguousarray(gray * scale)
    idx = kpca_sample_anchors(len(grid), m, seed)
    org = grid.origins()[idx]
    anchors = np.stack([scaled[y:y + b, x:x + b].ravel() for x, y in org])
    # anchors go through the same float32 rounding as the block pixels in the kernel
    anchors = anchors.astype(np.float32).astype(np.float64)
    model = kpca_fit(anchors, sigma)
    out = np.zeros((len(grid), m), dtype=dtype)  # fewer anchors than m: trailing zeros
    _kpca_kernel(scaled, b, np.ascontiguousarray(anchors, dtype=np.float32),
                 1.0 / (2.0 * sigma * sigma), np.ascontiguousarray(model.alphas.T), model.col_mean, model.total_mean,
                 out[:, : len(idx)] if len(idx) < m else out)
    return FeatureMatrix("kpca", out, grid.centers(), b, extra={"anchors": idx.tolist()})


# ---------------------------------------------------------------- dispatch

_GRAY_ROWS = {
    "dct": _dct_rows, "dwt": _dwt_rows, "fmt": _fmt_rows, "zernike": _zernike_rows,
    "blur": _blur_rows, "hu": _hu_rows, "svd": _svd_rows, "lin": _lin_rows,
    "circle": _circle_rows,
}


def _color_rows(method, rgb, b, dtype):
    gray = np.ascontiguousarray(to_grayscale(rgb))
    grid = tile(gray, b)
    rgb = np.ascontiguousarray(rgb, dtype=np.float64)
    if method == "luo":
        out = np.empty((len(grid), 7), dtype=dtype)
        _luo_kernel(rgb, gray, b, out)
    else:
        out = np.empty((len(grid), 4), dtype=dtype)
        _bravo_kernel(rgb, gray_levels(gray), b, out)
    return out


def extract(method: str, img: np.ndarray, b: int | None = None, *, seed: int = 0,
            dtype=np.float32, pca_variance: float = PCA_VARIANCE,
            kpca_m: int = KPCA_ANCHORS, kpca_sigma: float = KPCA_SIGMA,
            kpca_scale: float = KPCA_SCALE) -> FeatureMatrix:
    """Features of every overlapping block of ``img`` (gray or rgb).

    Rows are stored as ``dtype`` (float32 by default to halve memory on
    large images); all arithmetic happens in float64.
    """
    if method not in BLOCK_METHODS:
        raise ValueError(f"unknown block feature set {method!r}")
    b = DEFAULT_BLOCK_SIZE[method] if b is None else int(b)
    img = np.asarray(img, dtype=np.float64)
    if method in COLOR_METHODS:
        rgb = img if img.ndim == 3 else np.repeat(img[..., None], 3, axis=2)
        rows = _color_rows(method, check_rgb(rgb), b, dtype)
        return FeatureMatrix(method, rows, tile(rgb, b).centers(), b)
    gray = np.ascontiguousarray(to_grayscale(img))
    if method == "pca":
        return feat_pca(gray, b, pca_variance, dtype=dtype)
    if method == "kpca":
        return feat_kpca(gray, b, kpca_m, kpca_sigma, seed, dtype=dtype, scale=kpca_scale)
    rows = _GRAY_ROWS[method](gray, b, dtype)
    return FeatureMatrix(method, rows, tile(gray, b).centers(), b)


# ---------------------------------------------------------------- per-block API

def _single(method, block):
    block = np.asarray(block, dtype=np.float64)
    b = block.shape[0]
    if block.shape[:2] != (b, b):
        raise ValueError(f"expected a square block, got {block.shape}")
    if method in COLOR_METHODS:
        rgb = block if block.ndim == 3 else np.repeat(block[..., None], 3, axis=2)
        return _color_rows(method, rgb, b, np.float64)[0]
    return _GRAY_ROWS[method](to_grayscale(block), b, np.float64)[0]


def feat_dct(block):
    return _single("dct", block)


def feat_dwt(block):
    return _single("dwt", block)


def feat_fmt(block):
    return _single("fmt", block)


def feat_zernike(block):
    return _single("zernike", block)


def feat_blur(block):
    return _single("blur", block)


def feat_hu(block):
    return _single("hu", block)


def feat_svd(block):
    return _single("svd", block)


def feat_lin(block):
    return _single("lin", block)


def feat_circle(block):
    return _single("circle", block)


def feat_luo(block):
    return _single("luo", block)


def feat_bravo(block):
    return _single("bravo", block)


# ---------------------------------------------------------------- cache

def image_digest(img: np.ndarray) -> str:
    arr = np.ascontiguousarray(img, dtype=np.float64)
    h = hashlib.sha256()
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()[:32]


def save_features(path, fm: FeatureMatrix, digest: str) -> None:
    """Little-endian float32 rows and coords after a one-line JSON header."""
    from .imgio import atomic_write_bytes

    header = {"method": fm.method, "dim": fm.dim, "count": len(fm), "b": fm.block_size,
              "image_hash": digest, "extra": fm.extra}
    payload = (json.dumps(header, sort_keys=True).encode() + b"\n"
               + np.ascontiguousarray(fm.rows, dtype="<f4").tobytes()
               + np.ascontiguousarray(fm.coords, dtype="<f4").tobytes())
    atomic_write_bytes(path, payload)


def load_features(path, digest: str | None = None) -> FeatureMatrix | None:
    """Read a cached matrix; None if missing, corrupt or for another image."""
    path = Path(path)
    if not path.exists():
        return None
    data = path.read_bytes()
    nl = data.find(b"\n")
    try:
        header = json.loads(data[:nl])
    except ValueError:
        return None
    if digest is not None and header.get("image_hash") != digest:
        return None
    n, d = header["count"], header["dim"]
    body = data[nl + 1:]
    if len(body) != 4 * n * (d + 2):
        return None
    rows = np.frombuffer(body, dtype="<f4", count=n * d).reshape(n, d).astype(np.float32)
    coords = np.frombuffer(body, dtype="<f4", offset=4 * n * d).reshape(n, 2).astype(np.float64)
    return FeatureMatrix(header["method"], rows, coords, header["b"], extra=header["extra"])
