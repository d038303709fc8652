"""SIFT keypoints and 128-d descriptors.

Standard construction: Gaussian scale space with sigma0 = 1.6 (input blur
assumed 0.5), no initial upsampling, 4 octaves x 3 scales, difference of
Gaussians, quadratic sub-pixel refinement, contrast threshold 0.03 divided
by the number of scales per octave, edge-response limit r = 10, 36-bin
orientation histograms (every peak >= 80% of the maximum yields a
keypoint) and a 4 x 4 x 8 gradient descriptor clamped at 0.2 and
renormalized.

The image is shifted to a zero minimum and snapped to a 2**-16 grid first,
so adding a constant to an 8-bit image leaves the output bit-identical.
Output order: octave, scale, raster position, orientation.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit
from scipy import ndimage

from .blockfeat import FeatureMatrix
from .imgio import ImageError, check_gray

SIGMA0 = 1.6
INPUT_BLUR = 0.5
OCTAVES = 4
SCALES = 3
CONTRAST_THRESHOLD = 0.03
EDGE_RATIO = 10.0
BORDER = 5
MAX_INTERP_STEPS = 5
ORI_BINS = 36
ORI_PEAK_RATIO = 0.8
ORI_SIG_FACTOR = 1.5
ORI_RADIUS_FACTOR = 3.0 * ORI_SIG_FACTOR
DESCR_WIDTH = 4
DESCR_BINS = 8
DESCR_SCALE_FACTOR = 3.0
DESCR_MAG_THRESHOLD = 0.2
MIN_SIZE = 32


def _prepare(gray: np.ndarray) -> np.ndarray:
    g = np.asarray(gray, np.float64)
    return np.rint((g - g.min()) * 65536.0) / 65536.0


def gaussian_pyramid(img: np.ndarray, octaves: int = OCTAVES, scales: int = SCALES):
    """List of octaves, each an array (scales + 3, h, w)."""
    sig = np.zeros(scales + 3)
    sig[0] = SIGMA0
    k = 2.0 ** (1.0 / scales)
    for i in range(1, scales + 3):
        prev = SIGMA0 * k ** (i - 1)
        sig[i] = math.sqrt((prev * k) ** 2 - prev ** 2)
    base = ndimage.gaussian_filter(img, math.sqrt(max(SIGMA0 ** 2 - INPUT_BLUR ** 2, 0.01)),
                                   mode="reflect")
    pyr = []
    for o in range(octaves):
        if min(base.shape) < 2 * BORDER + 3:
            break
        levels = [base]
        for i in range(1, scales + 3):
            levels.append(ndimage.gaussian_filter(levels[-1], sig[i], mode="reflect"))
        pyr.append(np.stack(levels))
        base = levels[scales][::2, ::2]
    return pyr


@njit(cache=True)
def _refine(dog, cands, scales, contrast, edge_r, border):
    """Sub-pixel refinement; returns rows (layer, r, c, xi, xr, xc, response)."""
    n_layers, rows, cols = dog.shape
    out = np.empty((cands.shape[0], 7))
    m = 0
    for q in range(cands.shape[0]):
        layer = cands[q, 0]
        r = cands[q, 1]
        c = cands[q, 2]
        ok = False
        xi = 0.0
        xr = 0.0
        xc = 0.0
        g = np.zeros(3)
        hm = np.zeros((3, 3))
        for _ in range(MAX_INTERP_STEPS):
            v = dog[layer, r, c]
            g[0] = (dog[layer, r, c + 1] - dog[layer, r, c - 1]) * 0.5
            g[1] = (dog[layer, r + 1, c] - dog[layer, r - 1, c]) * 0.5
            g[2] = (dog[layer + 1, r, c] - dog[layer - 1, r, c]) * 0.5
            hm[0, 0] = dog[layer, r, c + 1] + dog[layer, r, c - 1] - 2 * v
            hm[1, 1] = dog[layer, r + 1, c] + dog[layer, r - 1, c] - 2 * v
            hm[2, 2] = dog[layer + 1, r, c] + dog[layer - 1, r, c] - 2 * v
            hm[0, 1] = (dog[layer, r + 1, c + 1] - dog[layer, r + 1, c - 1]
                        - dog[layer, r - 1, c + 1] + dog[layer, r - 1, c - 1]) * 0.25
            hm[0, 2] = (dog[layer + 1, r, c + 1] - dog[layer + 1, r, c - 1]
                        - dog[layer - 1, r, c + 1] + dog[layer - 1, r, c - 1]) * 0.25
            hm[1, 2] = (dog[layer + 1, r + 1, c] - dog[layer + 1, r - 1, c]
                        - dog[layer - 1, r + 1, c] + dog[layer - 1, r - 1, c]) * 0.25
            hm[1, 0] = hm[0, 1]
            hm[2, 0] = hm[0, 2]
            hm[2, 1] = hm[1, 2]
            det = np.linalg.det(hm)
            if abs(det) < 1e-18:
                break
            x = -np.linalg.solve(hm, g)
            xc = x[0]
            xr = x[1]
            xi = x[2]
            if abs(xi) < 0.5 and abs(xr) < 0.5 and abs(xc) < 0.5:
                ok = True
                break
            if abs(xi) > 1e6 or abs(xr) > 1e6 or abs(xc) > 1e6:
                break
            c += int(np.rint(xc))
            r += int(np.rint(xr))
            layer += int(np.rint(xi))
            if (layer < 1 or layer > scales or c < border or c >= cols - border
                    or r < border or r >= rows - border):
                break
        if not ok:
            continue
        resp = dog[layer, r, c] + 0.5 * (g[0] * xc + g[1] * xr + g[2] * xi)
        if abs(resp) * scales < contrast:
            continue
        dxx = hm[0, 0]
        dyy = hm[1, 1]
        dxy = hm[0, 1]
        tr = dxx + dyy
        det2 = dxx * dyy - dxy * dxy
        if det2 <= 0 or tr * tr * edge_r >= (edge_r + 1) ** 2 * det2:
            continue
        out[m, 0] = layer
        out[m, 1] = r
        out[m, 2] = c
        out[m, 3] = xi
        out[m, 4] = xr
        out[m, 5] = xc
        out[m, 6] = resp
        m += 1
    return out[:m]


@njit(cache=True)
def _orientation_hist(img, r0, c0, radius, sigma, nbins):
    rows, cols = img.shape
    raw = np.zeros(nbins)
    scale = -1.0 / (2.0 * sigma * sigma)
    for i in range(-radius, radius + 1):
        y = r0 + i
        if y <= 0 or y >= rows - 1:
            continue
        for j in range(-radius, radius + 1):
            x = c0 + j
            if x <= 0 or x >= cols - 1:
                continue
            dx = img[y, x + 1] - img[y, x - 1]
            dy = img[y - 1, x] - img[y + 1, x]
            w = np.exp((i * i + j * j) * scale)
            ang = np.degrees(np.arctan2(dy, dx))
            mag = np.sqrt(dx * dx + dy * dy)
            b = int(np.rint(nbins / 360.0 * ang))
            if b >= nbins:
                b -= nbins
            if b < 0:
                b += nbins
            raw[b] += w * mag
    hist = np.empty(nbins)
    for i in range(nbins):
        hist[i] = ((raw[(i - 2) % nbins] + raw[(i + 2) % nbins]) * (1.0 / 16.0)
                   + (raw[(i - 1) % nbins] + raw[(i + 1) % nbins]) * (4.0 / 16.0)
                   + raw[i] * (6.0 / 16.0))
    return hist


@njit(cache=True)
def _descriptor(img, ptx, pty, ori, scl, d, n, out):
    rows, cols = img.shape
    c0 = int(np.rint(ptx))
    r0 = int(np.rint(pty))
    angle = 360.0 - ori
    if abs(angle - 360.0) < 1e-6:
        angle = 0.0
    cos_t = np.cos(np.radians(angle))
    sin_t = np.sin(np.radians(angle))
    bins_per_deg = n / 360.0
    exp_scale = -1.0 / (d * d * 0.5)
    hist_width = DESCR_SCALE_FACTOR * scl
    radius = int(np.rint(hist_width * 1.4142135623730951 * (d + 1) * 0.5))
    radius = min(radius, int(np.sqrt(rows * rows + cols * cols)))
    cos_t /= hist_width
    sin_t /= hist_width
    hist = np.zeros((d + 2, d + 2, n + 2))
    for i in range(-radius, radius + 1):
        for j in range(-radius, radius + 1):
            c_rot = j * cos_t - i * sin_t
            r_rot = j * sin_t + i * cos_t
            rbin = r_rot + d / 2.0 - 0.5
            cbin = c_rot + d / 2.0 - 0.5
            r = r0 + i
            c = c0 + j
            if not (-1 < rbin < d and -1 < cbin < d and 0 < r < rows - 1 and 0 < c < cols - 1):
                continue
            dx = img[r, c + 1] - img[r, c - 1]
            dy = img[r - 1, c] - img[r + 1, c]
            w = np.exp((c_rot * c_rot + r_rot * r_rot) * exp_scale)
            o = np.degrees(np.arctan2(dy, dx))
            if o < 0:
                o += 360.0
            mag = np.sqrt(dx * dx + dy * dy) * w
            obin = (o - angle) * bins_per_deg
            rb0 = int(np.floor(rbin))
            cb0 = int(np.floor(cbin))
            ob0 = int(np.floor(obin))
            rbin -= rb0
            cbin -= cb0
            obin -= ob0
            if ob0 < 0:
                ob0 += n
            if ob0 >= n:
                ob0 -= n
            v_r1 = mag * rbin
            v_r0 = mag - v_r1
            v_rc11 = v_r1 * cbin
            v_rc10 = v_r1 - v_rc11
            v_rc01 = v_r0 * cbin
            v_rc00 = v_r0 - v_rc01
            v_rco111 = v_rc11 * obin
            v_rco110 = v_rc11 - v_rco111
            v_rco101 = v_rc10 * obin
            v_rco100 = v_rc10 - v_rco101
            v_rco011 = v_rc01 * obin
            v_rco010 = v_rc01 - v_rco011
            v_rco001 = v_rc00 * obin
            v_rco000 = v_rc00 - v_rco001
            hist[rb0 + 1, cb0 + 1, ob0] += v_rco000
            hist[rb0 + 1, cb0 + 1, ob0 + 1] += v_rco001
            hist[rb0 + 1, cb0 + 2, ob0] += v_rco010
            hist[rb0 + 1, cb0 + 2, ob0 + 1] += v_rco011
            hist[rb0 + 2, cb0 + 1, ob0] += v_rco100
            hist[rb0 + 2, cb0 + 1, ob0 + 1] += v_rco101
            hist[rb0 + 2, cb0 + 2, ob0] += v_rco110
            hist[rb0 + 2, cb0 + 2, ob0 + 1] += v_rco111
    k = 0
    for i in range(d):
        for j in range(d):
            hist[i + 1, j + 1, 0] += hist[i + 1, j + 1, n]
            hist[i + 1, j + 1, 1] += hist[i + 1, j + 1, n + 1]
            for o in range(n):
                out[k] = hist[i + 1, j + 1, o]
                k += 1
    nrm = 0.0
    for k in range(d * d * n):
        nrm += out[k] * out[k]
    thr = np.sqrt(nrm) * DESCR_MAG_THRESHOLD
    nrm = 0.0
    for k in range(d * d * n):
        if out[k] > thr:
            out[k] = thr
        nrm += out[k] * out[k]
    nrm = np.sqrt(nrm)
    if nrm > 0:
        for k in range(d * d * n):
            out[k] /= nrm


@njit(cache=True)
def _describe_octave(gauss, refined, octave, scales, sigma0, nbins, peak_ratio):
    """Orientations and descriptors of refined extrema of one octave.

    Returns rows (x, y, scale, angle_deg) in image coordinates and the
    descriptors.
    """
    n = refined.shape[0]
    cap = n * 4 + 1
    info = np.empty((cap, 4))
    desc = np.empty((cap, DESCR_WIDTH * DESCR_WIDTH * DESCR_BINS))
    m = 0
    mult = 2.0 ** octave
    for q in range(n):
        layer = int(refined[q, 0])
        r = int(refined[q, 1])
        c = int(refined[q, 2])
        xi = refined[q, 3]
        xr = refined[q, 4]
        xc = refined[q, 5]
        scl = sigma0 * 2.0 ** ((layer + xi) / scales)
        img = gauss[layer]
        radius = int(np.rint(ORI_RADIUS_FACTOR * scl))
        hist = _orientation_hist(img, r, c, radius, ORI_SIG_FACTOR * scl, nbins)
        hmax = hist.max()
        if hmax <= 0.0:
            continue
        thr = hmax * peak_ratio
        for j in range(nbins):
            left = hist[(j - 1) % nbins]
            right = hist[(j + 1) % nbins]
            if hist[j] > left and hist[j] > right and hist[j] >= thr:
                bin_ = j + 0.5 * (left - right) / (left - 2 * hist[j] + right)
                if bin_ < 0:
                    bin_ += nbins
                elif bin_ >= nbins:
                    bin_ -= nbins
                ang = 360.0 - (360.0 / nbins) * bin_
                if abs(ang - 360.0) < 1e-6:
                    ang = 0.0
                if m >= cap:
                    break
                _descriptor(img, c + xc, r + xr, ang, scl, DESCR_WIDTH, DESCR_BINS, desc[m])
                info[m, 0] = (c + xc) * mult
                info[m, 1] = (r + xr) * mult
                info[m, 2] = scl * mult
                info[m, 3] = ang
                m += 1
    return info[:m], desc[:m]


def detect_and_describe(gray: np.ndarray, octaves: int = OCTAVES, scales: int = SCALES,
                        contrast: float = CONTRAST_THRESHOLD, edge_ratio: float = EDGE_RATIO
                        ) -> FeatureMatrix:
    """SIFT keypoints of a gray image as a FeatureMatrix (method ``sift``).

    ``extra`` carries per-keypoint ``scale`` and ``orientation`` (radians,
    counter-clockwise as displayed).
    """
    gray = check_gray(gray)
    if min(gray.shape) < MIN_SIZE:
        raise ImageError(f"keypoint detection needs at least {MIN_SIZE}x{MIN_SIZE}, got {gray.shape}")
    img = _prepare(gray)
    infos, descs = [], []
    prefilter = 0.5 * contrast / scales
    for o, gauss in enumerate(gaussian_pyramid(img, octaves, scales)):
        dog = np.ascontiguousarray(gauss[1:] - gauss[:-1])
        mx = ndimage.maximum_filter(dog, size=3, mode="nearest")
        mn = ndimage.minimum_filter(dog, size=3, mode="nearest")
        ext = ((dog == mx) & (dog > prefilter)) | ((dog == mn) & (dog < -prefilter))
        ext[0] = ext[-1] = False
        ext[:, :BORDER] = ext[:, -BORDER:] = False
        ext[:, :, :BORDER] = ext[:, :, -BORDER:] = False
        cands = np.argwhere(ext).astype(np.int64)  # (layer, r, c), raster order per layer
        if len(cands) == 0:
            continue
        refined = _refine(dog, cands, scales, contrast, edge_ratio, BORDER)
        if len(refined) == 0:
            continue
        info, desc = _describe_octave(gauss, refined, o, scales, SIGMA0, ORI_BINS, ORI_PEAK_RATIO)
        infos.append(info)
        descs.append(desc)
    if infos:
        info = np.vstack(infos)
        desc = np.vstack(descs)
    else:
        info = np.zeros((0, 4))
        desc = np.zeros((0, DESCR_WIDTH * DESCR_WIDTH * DESCR_BINS))
    return FeatureMatrix("sift", desc.astype(np.float32), info[:, :2], None,
                         extra={"scale": info[:, 2], "orientation": np.deg2rad(info[:, 3])})
