"""Copy-move forgery synthesis with three-class ground truth.

A snippet is an alpha mask cut out of the base image at ``anchor``; pasting
rotates it, then scales it, about the alpha centroid, places it so that an
untransformed snippet would have its top-left at ``target``, and
alpha-composites it in z-order.

Ground truth labels (file encoding in brackets):

* background (0)
* copied (255): a fully opaque, visible target pixel of paste k whose source
  pixel is still showing original content, plus those source pixels
* boundary (128): partially transparent pixels of a visible paste or its
  source, and a one-pixel ring around each opaque region; excluded from
  pixel-level scoring

Occlusion: a target pixel covered by a later paste belongs to that paste;
source pixels that were overwritten by any paste lose their correspondence,
and so do the target pixels mapped from them. Only fully opaque later
pastes clear a ring pixel.

Positive rotation angles turn the snippet counter-clockwise as displayed.
"""

from __future__ import annotations

import base64
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image
from scipy import ndimage

from . import imgio
from .imgio import ImageError, resample

BACKGROUND = 0
COPIED = 1
BOUNDARY = 2

GT_ENCODING = {BACKGROUND: 0, COPIED: 255, BOUNDARY: 128}

OPAQUE = 1.0 - 1e-9
PLACEMENT_ATTEMPTS = 10_000
PLACEMENT_RESTARTS = 200


class TamperError(ValueError):
    pass


@dataclass
class Snippet:
    """Alpha mask (h, w) in [0, 1] whose content is the base at ``anchor``."""

    alpha: np.ndarray
    anchor: tuple[int, int]  # (x, y) top-left in the base image
    category: str | None = None

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 2 or not (self.alpha > 0).any():
            raise TamperError("snippet alpha must be 2-D with at least one visible pixel")
        self.anchor = (int(self.anchor[0]), int(self.anchor[1]))

    @property
    def shape(self) -> tuple[int, int]:
        return self.alpha.shape

    def centroid(self) -> np.ndarray:
        """(x, y) alpha-weighted centroid in snippet coordinates."""
        ys, xs = np.mgrid[0:self.alpha.shape[0], 0:self.alpha.shape[1]]
        m = self.alpha.sum()
        return np.array([(xs * self.alpha).sum() / m, (ys * self.alpha).sum() / m])

    def pixels(self, base: np.ndarray) -> np.ndarray:
        x, y = self.anchor
        h, w = self.alpha.shape
        return base[y:y + h, x:x + w]

    def rgba(self, base: np.ndarray) -> np.ndarray:
        return np.concatenate([self.pixels(base), self.alpha[..., None]], axis=2)


@dataclass
class PasteOp:
    snippet_id: str
    target: tuple[int, int]  # (x, y) of the untransformed snippet's top-left
    rotation: float = 0.0  # degrees
    scale: float = 1.0
    noise_sigma: float = 0.0
    order: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise TamperError(f"paste scale must be positive, got {self.scale}")
        if self.noise_sigma < 0:
            raise TamperError(f"noise sigma must be non-negative, got {self.noise_sigma}")
        self.target = (int(self.target[0]), int(self.target[1]))


@dataclass
class ForgeryCase:
    base_image_id: str
    snippets: dict[str, Snippet]
    pastes: list[PasteOp]
    global_post: dict = field(default_factory=dict)  # jpeg_quality, downsample_factor, subsampling
    rng_seed: int = 0

    def to_json(self) -> dict:
        return {
            "base_image_id": self.base_image_id,
            "rng_seed": self.rng_seed,
            "global_post": dict(self.global_post),
            "pastes": [asdict(p) for p in self.pastes],
            "snippets": {k: {"anchor": list(s.anchor), "category": s.category,
                             "alpha_png": _alpha_to_b64(s.alpha)}
                         for k, s in self.snippets.items()},
        }

    @classmethod
    def from_json(cls, data: dict) -> "ForgeryCase":
        snippets = {k: Snippet(_alpha_from_b64(v["alpha_png"]), tuple(v["anchor"]), v["category"])
                    for k, v in data["snippets"].items()}
        pastes = [PasteOp(**{**p, "target": tuple(p["target"])}) for p in data["pastes"]]
        return cls(data["base_image_id"], snippets, pastes, dict(data.get("global_post", {})),
                   int(data.get("rng_seed", 0)))


def _alpha_to_b64(alpha: np.ndarray) -> str:
    return base64.b64encode(imgio.png_bytes(imgio.to_uint8(alpha))).decode("ascii")


def _alpha_from_b64(text: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(text))) as pil:
        return imgio.from_uint8(np.asarray(pil.convert("L")))


# ---------------------------------------------------------------- noise

def add_gaussian_noise(img: np.ndarray, sigma: float, seed) -> np.ndarray:
    """i.i.d. N(0, sigma^2) per channel and pixel, clamped to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0)


# ---------------------------------------------------------------- geometry

def paste_matrix(op: PasteOp) -> np.ndarray:
    """2x2 linear part: scale * rotation (counter-clockwise on screen)."""
    th = np.deg2rad(op.rotation)
    c, s = np.cos(th), np.sin(th)
    return op.scale * np.array([[c, s], [-s, c]])


def paste_affine(op: PasteOp, snip: Snippet) -> tuple[np.ndarray, np.ndarray]:
    """(A, t) mapping base source coordinates to forged-image coordinates."""
    a = paste_matrix(op)
    c = snip.centroid()
    anchor = np.array(snip.anchor, dtype=np.float64)
    target = np.array(op.target, dtype=np.float64)
    # p = target + c + A (s - anchor - c)
    t = target + c - a @ (anchor + c)
    return a, t


@dataclass
class WarpedPaste:
    y0: int
    x0: int
    rgb: np.ndarray  # (h, w, 3)
    alpha: np.ndarray  # (h, w)
    src_x: np.ndarray  # source (base) coordinates of each pixel, float
    src_y: np.ndarray


def warp_snippet(base: np.ndarray, snip: Snippet, op: PasteOp) -> WarpedPaste:
    """Inverse-map the transformed snippet onto the image grid (bilinear)."""
    h_img, w_img = base.shape[:2]
    a, t = paste_affine(op, snip)
    sh, sw = snip.shape
    ax, ay = snip.anchor
    corners = np.array([[ax - 1, ay - 1], [ax + sw, ay - 1], [ax - 1, ay + sh], [ax + sw, ay + sh]],
                       dtype=np.float64)
    mapped = corners @ a.T + t
    x0 = int(np.floor(mapped[:, 0].min())) - 1
    x1 = int(np.ceil(mapped[:, 0].max())) + 2
    y0 = int(np.floor(mapped[:, 1].min())) - 1
    y1 = int(np.ceil(mapped[:, 1].max())) + 2
    x0c, x1c = max(x0, 0), min(x1, w_img)
    y0c, y1c = max(y0, 0), min(y1, h_img)
    if x0c >= x1c or y0c >= y1c:
        raise TamperError(f"paste of {op.snippet_id!r} at {op.target} lies outside the image")
    ys, xs = np.mgrid[y0c:y1c, x0c:x1c].astype(np.float64)
    inv = np.linalg.inv(a)
    px = xs - t[0]
    py = ys - t[1]
    sx = inv[0, 0] * px + inv[0, 1] * py
    sy = inv[1, 0] * px + inv[1, 1] * py
    # snap round-off so exact grid hits (pure translations) do not leak alpha
    sx = _snap(sx)
    sy = _snap(sy)
    # snippet-local coordinates; alpha is zero outside the snippet array
    lx = sx - ax
    ly = sy - ay
    alpha = _sample_padded(snip.alpha, lx, ly)
    rgb, _ = imgio.sample_bilinear(snip.pixels(base), np.clip(lx, 0, sw - 1), np.clip(ly, 0, sh - 1))
    if not (alpha > 0).any():
        raise TamperError(f"paste of {op.snippet_id!r} at {op.target} lies outside the image")
    return WarpedPaste(y0c, x0c, rgb, alpha, sx, sy)


def _snap(v: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    r = np.rint(v)
    return np.where(np.abs(v - r) < tol, r, v)


def _sample_padded(arr: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    padded = np.pad(arr, 1)
    vals, _ = imgio.sample_bilinear(padded, x + 1, y + 1, fill=0.0)
    return vals


# ---------------------------------------------------------------- splice

@dataclass
class SpliceResult:
    image: np.ndarray
    labels: np.ndarray  # int8 class per pixel (BACKGROUND/COPIED/BOUNDARY)
    owner: np.ndarray  # visible layer per pixel: -1 base, k = k-th paste in z-order
    target_copied: list[np.ndarray]  # per paste (z-order), bool masks
    source_copied: list[np.ndarray]
    order: list[int]  # indices into case.pastes, in z-order


def _ring(mask: np.ndarray) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool)) & ~mask


def splice_detailed(base: np.ndarray, case: ForgeryCase) -> SpliceResult:
    base = imgio.check_rgb(base)
    h, w = base.shape[:2]
    for op in case.pastes:
        if op.snippet_id not in case.snippets:
            raise TamperError(f"unknown snippet id {op.snippet_id!r}")
    for sid, snip in case.snippets.items():
        ax, ay = snip.anchor
        sh, sw = snip.shape
        if not (0 <= ax and 0 <= ay and ax + sw <= w and ay + sh <= h):
            raise TamperError(f"snippet {sid!r} at {snip.anchor} does not fit the base image")

    order = sorted(range(len(case.pastes)), key=lambda k: (case.pastes[k].order, k))
    out = base.copy()
    owner = np.full((h, w), -1, np.int32)
    warps = []
    full_alpha = []
    for z, k in enumerate(order):
        op = case.pastes[k]
        snip = case.snippets[op.snippet_id]
        wp = warp_snippet(base, snip, op)
        rgb = wp.rgb
        if op.noise_sigma > 0:
            rgb = add_gaussian_noise(rgb, op.noise_sigma, [case.rng_seed, z])
        sl = (slice(wp.y0, wp.y0 + wp.alpha.shape[0]), slice(wp.x0, wp.x0 + wp.alpha.shape[1]))
        a = wp.alpha[..., None]
        out[sl] = a * rgb + (1.0 - a) * out[sl]
        alpha_full = np.zeros((h, w))
        alpha_full[sl] = wp.alpha
        owner[alpha_full > 0] = z
        warps.append(wp)
        full_alpha.append(alpha_full)

    n = len(order)
    # what each later paste hides: any visible coverage hides from the copied class
    target_copied, source_copied = [], []
    ring_masks = []
    partial_masks = []
    for z, k in enumerate(order):
        op = case.pastes[k]
        snip = case.snippets[op.snippet_id]
        wp = warps[z]
        alpha_full = full_alpha[z]
        opaque = alpha_full >= OPAQUE
        # source position of each opaque target pixel (nearest base pixel)
        sx = np.full((h, w), -1, np.int64)
        sy = np.full((h, w), -1, np.int64)
        sl = (slice(wp.y0, wp.y0 + wp.alpha.shape[0]), slice(wp.x0, wp.x0 + wp.alpha.shape[1]))
        sx[sl] = np.rint(wp.src_x).astype(np.int64)
        sy[sl] = np.rint(wp.src_y).astype(np.int64)
        src_alpha = np.zeros((h, w))
        ax, ay = snip.anchor
        sh, sw = snip.shape
        src_alpha[ay:ay + sh, ax:ax + sw] = snip.alpha
        src_opaque = src_alpha >= OPAQUE
        valid = opaque & (owner == z) & (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
        sxv = np.clip(sx, 0, w - 1)
        syv = np.clip(sy, 0, h - 1)
        valid &= src_opaque[syv, sxv] & (owner[syv, sxv] == -1)
        tgt = valid
        src = np.zeros((h, w), bool)
        src[syv[tgt], sxv[tgt]] = True
        target_copied.append(tgt)
        source_copied.append(src)
        # rims: partial alpha of the visible paste and of its source, plus rings
        partial_t = (alpha_full > 0) & ~opaque & (owner == z)
        partial_s = (src_alpha > 0) & ~src_opaque & (owner == -1)
        partial_masks.append(partial_t | partial_s)
        ring_masks.append((_ring(opaque), z, True))
        ring_masks.append((_ring(src_opaque), z, False))

    labels = np.zeros((h, w), np.int8)
    copied = np.zeros((h, w), bool)
    for z in range(n):
        copied |= target_copied[z] | source_copied[z]
    labels[copied] = COPIED
    boundary = np.zeros((h, w), bool)
    for m in partial_masks:
        boundary |= m
    for ring, z, is_target in ring_masks:
        # a ring pixel is cleared only by a fully opaque paste drawn after it
        cleared = np.zeros((h, w), bool)
        for z2 in range(z + 1 if is_target else 0, n):
            cleared |= full_alpha[z2] >= OPAQUE
        boundary |= ring & ~cleared
    labels[boundary] = BOUNDARY
    return SpliceResult(out, labels, owner, target_copied, source_copied, order)


def splice(base: np.ndarray, case: ForgeryCase) -> tuple[np.ndarray, np.ndarray]:
    """Forged image (before global post-processing) and its label map."""
    res = splice_detailed(base, case)
    return res.image, res.labels


def apply_global_post(img: np.ndarray, labels: np.ndarray, post: dict):
    """Downsample image and labels, and/or JPEG-compress the image.

    Returns ``(image, labels, jpeg_bytes_or_None)``. JPEG leaves the labels
    untouched; downsampling resamples per-class fractions: copied where the
    copied fraction is >= 0.999, background where neither copied nor
    boundary reach 0.001, boundary otherwise.
    """
    factor = post.get("downsample_factor")
    if factor is not None and factor != 1.0:
        img = np.clip(resample(img, factor), 0.0, 1.0)
        fc = resample((labels == COPIED).astype(float), factor)
        fb = resample((labels == BOUNDARY).astype(float), factor)
        new = np.full(fc.shape, BOUNDARY, np.int8)
        new[fc >= 0.999] = COPIED
        new[(fc <= 0.001) & (fb <= 0.001)] = BACKGROUND
        labels = new
    img = imgio.from_uint8(imgio.to_uint8(img))
    q = post.get("jpeg_quality")
    data = None
    if q is not None:
        data = imgio.encode_jpeg(img, int(q), post.get("subsampling"))
        img = imgio.decode_jpeg(data)
    return img, labels, data


def render_case(base: np.ndarray, case: ForgeryCase):
    """Full synthesis: splice, then global post. Returns (image, labels, jpeg_bytes)."""
    img, labels = splice(base, case)
    return apply_global_post(img, labels, case.global_post)


def encode_gt(labels: np.ndarray) -> np.ndarray:
    out = np.zeros(labels.shape, np.uint8)
    for k, v in GT_ENCODING.items():
        out[labels == k] = v
    return out


def decode_gt(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    labels = np.full(arr.shape, BOUNDARY, np.int8)
    labels[arr < 64] = BACKGROUND
    labels[arr >= 192] = COPIED
    return labels


# ---------------------------------------------------------------- placement

def _boxes_apart(a, b, gap):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return (ax + aw + gap <= bx or bx + bw + gap <= ax
            or ay + ah + gap <= by or by + bh + gap <= ay)


def _place_boxes(rng, h, w, size, n, src, min_dist):
    """Targets drawn one by one, uniformly over the still-feasible positions;
    None on a dead end."""
    ys, xs = np.mgrid[0:h - size + 1, 0:w - size + 1]
    boxes = [(src[0], src[1], size, size)]
    free = np.ones(xs.shape, bool)
    for _ in range(n):
        bx, by = boxes[-1][:2]
        # one-pixel gap between boxes, centre distance >= min_dist
        apart = ((xs + size + 1 <= bx) | (bx + size + 1 <= xs)
                 | (ys + size + 1 <= by) | (by + size + 1 <= ys))
        free &= apart & (np.hypot(xs - bx, ys - by) >= min_dist)
        cand = np.flatnonzero(free)
        if cand.size == 0:
            return None
        k = cand[int(rng.integers(0, cand.size))]
        boxes.append((int(xs.flat[k]), int(ys.flat[k]), size, size))
    return boxes


def multi_paste_case(base: np.ndarray, block, n: int, seed: int, min_dist: float = 50.0,
                     base_image_id: str = "base") -> ForgeryCase:
    """One opaque square block pasted ``n`` times at random disjoint targets.

    ``block`` is ``(x, y, size)`` for a fixed source or an int size for a
    random source. Targets keep a one-pixel gap to each other and to the
    source; all pairwise centre distances (source included) are at least
    ``min_dist``. Each target is drawn uniformly from the positions still
    free; a dead end restarts the layout (at most ``PLACEMENT_RESTARTS``).
    """
    if n < 2:
        raise TamperError(f"multi-paste needs n >= 2, got {n}")
    h, w = np.shape(base)[:2]
    rng = np.random.default_rng(seed)
    if np.isscalar(block):
        size = int(block)
        if size > min(h, w):
            raise TamperError(f"block {size} does not fit a {h}x{w} image")
        sx, sy = int(rng.integers(0, w - size + 1)), int(rng.integers(0, h - size + 1))
    else:
        sx, sy, size = (int(v) for v in block)
    if sx < 0 or sy < 0 or sx + size > w or sy + size > h:
        raise TamperError(f"block at ({sx}, {sy}) size {size} does not fit a {h}x{w} image")
    boxes = None
    for _ in range(PLACEMENT_RESTARTS):
        boxes = _place_boxes(rng, h, w, size, n, (sx, sy), min_dist)
        if boxes is not None:
            break
    if boxes is None:
        raise TamperError(f"could not place {n} targets of size {size} in {h}x{w}")
    snip = Snippet(np.ones((size, size)), (sx, sy), None)
    pastes = [PasteOp("block", (b[0], b[1]), order=z) for z, b in enumerate(boxes[1:])]
    return ForgeryCase(base_image_id, {"block": snip}, pastes, {}, int(seed))


def random_target(rng: np.random.Generator, shape, snip_shape, anchor, min_shift: float,
                  attempts: int = PLACEMENT_ATTEMPTS) -> tuple[int, int]:
    """Target top-left with the source box disjoint and shift >= min_shift."""
    h, w = shape
    sh, sw = snip_shape
    ax, ay = anchor
    for _ in range(attempts):
        x = int(rng.integers(0, w - sw + 1))
        y = int(rng.integers(0, h - sh + 1))
        if np.hypot(x - ax, y - ay) >= min_shift and _boxes_apart((x, y, sw, sh), (ax, ay, sw, sh), 2):
            return x, y
    raise TamperError("could not place a target for the snippet")


def case_to_json_text(case: ForgeryCase, extra: dict | None = None) -> str:
    data = {"case": case.to_json()}
    if extra:
        data.update(extra)
    return json.dumps(data, sort_keys=True, indent=1)
