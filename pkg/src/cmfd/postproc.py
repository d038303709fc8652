"""From filtered matches to detected regions.

Block methods use same-affine-transformation selection (SATS): region
growing over pairs whose source blocks are 8-neighbours and which agree with
one affine map. Keypoint methods cluster match endpoints (single linkage),
estimate an affine map per pair of clusters with RANSAC plus a
gold-standard refit, merge near-identical maps, and mark regions where the
image correlates with its own warped copy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import ndimage
from scipy.cluster.hierarchy import fcluster, linkage

from .imgio import sample_bilinear
from .matchfilt import Matches

SATS_TOL = 2.0
SATS_SEED_TOL = 3.0
EIGHT = np.ones((3, 3), bool)

RANSAC_ITERS = 2000
RANSAC_TOL = 3.0
RANSAC_CONFIDENCE = 0.99
MIN_CORRESPONDENCES = 4
SV_BOUNDS = (0.25, 4.0)

KP_CUT = 25.0
KP_CUT_FEW = 75.0
KP_FEW_MATCHES = 100
MERGE_A_RMSE = 0.03
MERGE_T_RMSE = 10.0
NCC_WINDOW = 5
SMOOTH_SIGMA = 1.5
SMOOTH_SIZE = 7
NCC_THRESHOLD = 0.4
KP_MIN_AREA = 1000


@dataclass(frozen=True)
class AffineTransform:
    """x' = A x + t, points as (x, y)."""

    A: np.ndarray
    t: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, np.float64) @ self.A.T + self.t

    def inverse(self) -> "AffineTransform":
        inv = np.linalg.inv(self.A)
        return AffineTransform(inv, -inv @ self.t)

    def is_plausible(self, diag: float | None = None) -> bool:
        if not np.all(np.isfinite(self.A)) or not np.all(np.isfinite(self.t)):
            return False
        sv = np.linalg.svd(self.A, compute_uv=False)
        if sv[-1] < SV_BOUNDS[0] or sv[0] > SV_BOUNDS[1]:
            return False
        return diag is None or float(np.hypot(*self.t)) <= diag

    def to_json(self) -> dict:
        return {"A": np.round(self.A, 9).tolist(), "t": np.round(self.t, 6).tolist()}


@dataclass
class MatchCluster:
    members: np.ndarray  # indices into the Matches the cluster was built from
    src: np.ndarray  # (n, 2) oriented source points
    dst: np.ndarray
    transform: AffineTransform

    @property
    def h(self) -> int:
        return len(self.members)

    @property
    def src_centroid(self) -> np.ndarray:
        return self.src.mean(axis=0)

    @property
    def dst_centroid(self) -> np.ndarray:
        return self.dst.mean(axis=0)


@dataclass
class DetectionResult:
    mask: np.ndarray  # bool (H, W)
    clusters: list = field(default_factory=list)
    transforms: list = field(default_factory=list)

    def regions(self) -> list[dict]:
        lab, n = ndimage.label(self.mask, structure=EIGHT)
        if n == 0:
            return []
        areas = np.bincount(lab.ravel())[1:]
        boxes = ndimage.find_objects(lab)
        return [{"area": int(a), "bbox": [s[1].start, s[0].start, s[1].stop, s[0].stop]}
                for a, s in zip(areas, boxes)]


# ---------------------------------------------------------------- affine fits

def affine_exact(src: np.ndarray, dst: np.ndarray) -> AffineTransform | None:
    """Affine map through three correspondences; None if collinear."""
    m = np.hstack([src, np.ones((3, 1))])
    if abs(np.linalg.det(m)) < 1e-9:
        return None
    sol = np.linalg.solve(m, dst)  # (3, 2)
    return AffineTransform(sol[:2].T.copy(), sol[2].copy())


def affine_lstsq(src: np.ndarray, dst: np.ndarray) -> AffineTransform | None:
    """Ordinary least squares on centred coordinates (residuals in dst)."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    s = src - cs
    d = dst - cd
    g = s.T @ s
    if np.linalg.cond(g) > 1e10:
        return None
    a = np.linalg.solve(g, s.T @ d).T
    return AffineTransform(a, cd - a @ cs)


def affine_gold_standard(src: np.ndarray, dst: np.ndarray) -> AffineTransform | None:
    """Maximum-likelihood affine fit with errors in both point sets.

    Both sets are centred on their centroids; the 2-D subspace spanned by the
    stacked vectors (x, x') is the span of the two leading right singular
    vectors V1 = [B; C], and the linear part is C B^-1.
    """
    src = np.asarray(src, np.float64)
    dst = np.asarray(dst, np.float64)
    if len(src) < 3:
        return None
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    stacked = np.hstack([src - cs, dst - cd])
    _, sv, vt = np.linalg.svd(stacked, full_matrices=False)
    if sv[1] <= 1e-12 * max(sv[0], 1.0):
        return None
    v1 = vt[:2].T  # (4, 2)
    bmat = v1[:2]
    cmat = v1[2:]
    if abs(np.linalg.det(bmat)) < 1e-12:
        return None
    a = cmat @ np.linalg.inv(bmat)
    return AffineTransform(a, cd - a @ cs)


def residuals(tf: AffineTransform, src, dst) -> np.ndarray:
    return np.hypot(*(tf.apply(src) - dst).T)


# ---------------------------------------------------------------- SATS

@njit(cache=True)
def _fit3(s, d, i0, i1, i2, out):
    """Exact affine through pairs i0, i1, i2 into out = [a, b, tx, c, e, ty]."""
    x0, y0 = s[i0, 0], s[i0, 1]
    x1, y1 = s[i1, 0], s[i1, 1]
    x2, y2 = s[i2, 0], s[i2, 1]
    det = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    if abs(det) < 1e-9:
        return False
    for k in range(2):
        u0 = d[i0, k]
        u1 = d[i1, k] - u0
        u2 = d[i2, k] - u0
        a = (u1 * (y2 - y0) - u2 * (y1 - y0)) / det
        b = ((x1 - x0) * u2 - (x2 - x0) * u1) / det
        out[3 * k] = a
        out[3 * k + 1] = b
        out[3 * k + 2] = u0 - a * x0 - b * y0
    return True


@njit(cache=True)
def _fit_ls(s, d, members, n, out):
    """Least-squares affine over members[:n]; keeps ``out`` if ill-posed."""
    mx = 0.0
    my = 0.0
    for q in range(n):
        mx += s[members[q], 0]
        my += s[members[q], 1]
    mx /= n
    my /= n
    sxx = 0.0
    sxy = 0.0
    syy = 0.0
    for q in range(n):
        dx = s[members[q], 0] - mx
        dy = s[members[q], 1] - my
        sxx += dx * dx
        sxy += dx * dy
        syy += dy * dy
    det = sxx * syy - sxy * sxy
    if det <= 1e-9 * max(1.0, sxx * syy):
        return
    for k in range(2):
        mu = 0.0
        for q in range(n):
            mu += d[members[q], k]
        mu /= n
        bx = 0.0
        by = 0.0
        for q in range(n):
            dx = s[members[q], 0] - mx
            dy = s[members[q], 1] - my
            u = d[members[q], k] - mu
            bx += dx * u
            by += dy * u
        a = (bx * syy - by * sxy) / det
        b = (by * sxx - bx * sxy) / det
        out[3 * k] = a
        out[3 * k + 1] = b
        out[3 * k + 2] = mu - a * mx - b * my


@njit(cache=True)
def _sats_kernel(s, d, cell, gw, gh, starts, order, tol, seed_tol, tau2):
    n = s.shape[0]
    label = np.full(n, -1, np.int64)  # -1 free, -2 rejected seed, >= 0 cluster
    members = np.empty(n, np.int64)
    params = np.empty(6)
    n_clusters = 0
    tol2 = tol * tol
    cand = np.empty(64, np.int64)
    for oi in range(n):
        p = order[oi]
        if label[p] != -1:
            continue
        cx = cell[p] % gw
        cy = cell[p] // gw
        # neighbours in the 8-neighbourhood whose partners are close too
        nc = 0
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                x = cx + dx
                y = cy + dy
                if x < 0 or y < 0 or x >= gw or y >= gh:
                    continue
                c = y * gw + x
                for t in range(starts[c], starts[c + 1]):
                    q = order[t]
                    if q == p or label[q] != -1:
                        continue
                    ddx = d[q, 0] - d[p, 0]
                    ddy = d[q, 1] - d[p, 1]
                    if ddx * ddx + ddy * ddy <= seed_tol * seed_tol and nc < 64:
                        cand[nc] = q
                        nc += 1
        found = False
        for a in range(nc):
            for b in range(a + 1, nc):
                if _fit3(s, d, p, cand[a], cand[b], params):
                    members[0] = p
                    members[1] = cand[a]
                    members[2] = cand[b]
                    found = True
                    break
            if found:
                break
        if not found:
            label[p] = -2
            continue
        cid = n_clusters
        for q in range(3):
            label[members[q]] = cid
        size = 3
        head = 0
        while head < size:
            level_end = size
            while head < level_end:
                m = members[head]
                head += 1
                mx = cell[m] % gw
                my = cell[m] // gw
                for dy in range(-1, 2):
                    for dx in range(-1, 2):
                        x = mx + dx
                        y = my + dy
                        if x < 0 or y < 0 or x >= gw or y >= gh:
                            continue
                        c = y * gw + x
                        for t in range(starts[c], starts[c + 1]):
                            r = order[t]
                            if label[r] >= 0:
                                continue
                            px = params[0] * s[r, 0] + params[1] * s[r, 1] + params[2]
                            py = params[3] * s[r, 0] + params[4] * s[r, 1] + params[5]
                            ex = px - d[r, 0]
                            ey = py - d[r, 1]
                            if ex * ex + ey * ey <= tol2:
                                label[r] = cid
                                members[size] = r
                                size += 1
            _fit_ls(s, d, members, size, params)
        if size >= tau2:
            n_clusters += 1
        else:
            for q in range(size):
                label[members[q]] = -3
    return label, n_clusters


def orient_pairs(matches: Matches, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(src, dst, swapped): each pair oriented so its shift points into y > 0
    (or y == 0, x > 0); copies of one region then share one orientation."""
    coords = np.asarray(coords, np.float64)
    a = coords[matches.i]
    b = coords[matches.j]
    v = b - a
    swap = (v[:, 1] < 0) | ((v[:, 1] == 0) & (v[:, 0] < 0))
    src = np.where(swap[:, None], b, a)
    dst = np.where(swap[:, None], a, b)
    return src, dst, swap


def sats(matches: Matches, coords: np.ndarray, tau2: int, tol: float = SATS_TOL,
         seed_tol: float = SATS_SEED_TOL) -> list[MatchCluster]:
    """Grow same-transform clusters of block pairs; keep those with >= tau2 pairs."""
    if len(matches) < 3:
        return []
    src, dst, _ = orient_pairs(matches, coords)
    # floor, not rint: half-integer centres would round to even and leave gaps
    cells_xy = np.floor(src).astype(np.int64)
    lo = cells_xy.min(axis=0)
    cells_xy -= lo
    gw = int(cells_xy[:, 0].max()) + 1
    gh = int(cells_xy[:, 1].max()) + 1
    cell = cells_xy[:, 1] * gw + cells_xy[:, 0]
    # raster order of source cells, then by the partner position for ties
    order = np.lexsort((dst[:, 0], dst[:, 1], cell)).astype(np.int64)
    starts = np.searchsorted(cell[order], np.arange(gw * gh + 1)).astype(np.int64)
    label, n = _sats_kernel(src, dst, cell, gw, gh, starts, order, float(tol), float(seed_tol),
                            int(tau2))
    out = []
    for cid in range(n):
        idx = np.flatnonzero(label == cid)
        tf = affine_lstsq(src[idx], dst[idx]) or AffineTransform(np.eye(2), np.zeros(2))
        out.append(MatchCluster(idx, src[idx], dst[idx], tf))
    return out


def _remove_small(mask: np.ndarray, min_exclusive: int) -> np.ndarray:
    """Keep 8-connected components with more than ``min_exclusive`` pixels."""
    lab, n = ndimage.label(mask, structure=EIGHT)
    if n == 0:
        return mask.astype(bool)
    areas = np.bincount(lab.ravel())
    keep = areas > min_exclusive
    keep[0] = False
    return keep[lab]


def blocks_to_map(clusters: list[MatchCluster], shape, b: int, tau3: int,
                  center_only: bool = False) -> np.ndarray:
    """Paint the b x b support of both endpoints of every clustered pair,
    then drop components of at most ``tau3`` pixels.

    With ``center_only`` the gated map is reduced to the block centres."""
    h, w = shape[:2]
    mask = np.zeros((h, w), bool)
    centres = np.zeros((h, w), bool)
    half = (b - 1) / 2.0
    # difference-array painting of all block supports
    acc = np.zeros((h + 1, w + 1), np.int64)
    for cl in clusters:
        for pts in (cl.src, cl.dst):
            org = np.rint(pts - half).astype(np.int64)
            x0 = np.clip(org[:, 0], 0, w)
            y0 = np.clip(org[:, 1], 0, h)
            x1 = np.clip(org[:, 0] + b, 0, w)
            y1 = np.clip(org[:, 1] + b, 0, h)
            np.add.at(acc, (y0, x0), 1)
            np.add.at(acc, (y0, x1), -1)
            np.add.at(acc, (y1, x0), -1)
            np.add.at(acc, (y1, x1), 1)
            c = np.floor(pts).astype(np.int64)
            ok = (c[:, 0] >= 0) & (c[:, 0] < w) & (c[:, 1] >= 0) & (c[:, 1] < h)
            centres[c[ok, 1], c[ok, 0]] = True
    mask = acc.cumsum(axis=0).cumsum(axis=1)[:h, :w] > 0
    mask = _remove_small(mask, tau3)
    return mask & centres if center_only else mask


# ---------------------------------------------------------------- keypoints

def cluster_points(points: np.ndarray, cut: float) -> np.ndarray:
    """Single-linkage flat clusters (merge while the closest distance <= cut).

    Labels are 0..k-1 in order of first appearance.
    """
    points = np.asarray(points, np.float64)
    if len(points) == 0:
        return np.zeros(0, np.int64)
    if len(points) == 1:
        return np.zeros(1, np.int64)
    raw = fcluster(linkage(points, method="single"), t=cut, criterion="distance")
    _, first, inv = np.unique(raw, return_index=True, return_inverse=True)
    rank = np.empty(len(first), np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[inv]


def cluster_keypoints(matches: Matches, coords: np.ndarray, cut: float | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Cluster labels of the (i, j) endpoints of every pair.

    Without an explicit ``cut``: 25 px, or 75 px when fewer than 100 pairs.
    """
    if cut is None:
        cut = KP_CUT_FEW if len(matches) < KP_FEW_MATCHES else KP_CUT
    coords = np.asarray(coords, np.float64)
    pts = np.vstack([coords[matches.i], coords[matches.j]])
    lab = cluster_points(pts, cut)
    return lab[: len(matches)], lab[len(matches):]


@dataclass
class RansacResult:
    transform: AffineTransform | None
    inliers: np.ndarray  # bool mask over the correspondences


def ransac_affine(src: np.ndarray, dst: np.ndarray, iters: int = RANSAC_ITERS,
                  inlier_tol: float = RANSAC_TOL, seed: int = 0,
                  confidence: float = RANSAC_CONFIDENCE, diag: float | None = None
                  ) -> RansacResult:
    """RANSAC over 3-point samples, then iterated gold-standard refits.

    A refit is adopted only if it does not lose inliers. Implausible models
    (singular values outside [0.25, 4], translation longer than ``diag``)
    are never selected.
    """
    src = np.asarray(src, np.float64)
    dst = np.asarray(dst, np.float64)
    n = len(src)
    none = RansacResult(None, np.zeros(n, bool))
    if n < MIN_CORRESPONDENCES:
        return none
    rng = np.random.default_rng(seed)
    best_count, best_err, best_tf = 0, np.inf, None
    needed = iters
    it = 0
    while it < min(iters, needed):
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        tf = affine_exact(src[idx], dst[idx])
        if tf is None or not tf.is_plausible(diag):
            continue
        res = residuals(tf, src, dst)
        inl = res <= inlier_tol
        count = int(inl.sum())
        err = float(res[inl].sum())
        if count > best_count or (count == best_count and err < best_err):
            best_count, best_err, best_tf = count, err, tf
            w = count / n
            if w >= 1.0:
                needed = it
            else:
                p_good = max(w ** 3, 1e-12)
                needed = int(np.ceil(np.log(1 - confidence) / np.log(1 - p_good))) if p_good < 1 else it
    if best_tf is None or best_count < MIN_CORRESPONDENCES:
        return none
    tf = best_tf
    inl = residuals(tf, src, dst) <= inlier_tol
    for _ in range(10):
        cand = affine_gold_standard(src[inl], dst[inl])
        if cand is None or not cand.is_plausible(diag):
            break
        new_inl = residuals(cand, src, dst) <= inlier_tol
        if new_inl.sum() < inl.sum():
            break
        same = np.array_equal(new_inl, inl)
        tf, inl = cand, new_inl
        if same:
            break
    if inl.sum() < MIN_CORRESPONDENCES:
        return none
    return RansacResult(tf, inl)


def transform_rmse(a: AffineTransform, b: AffineTransform) -> tuple[float, float]:
    ra = float(np.sqrt(np.mean((a.A - b.A) ** 2)))
    rt = float(np.sqrt(np.mean((a.t - b.t) ** 2)))
    return ra, rt


def merge_groups(transforms: list[AffineTransform], a_tol: float = MERGE_A_RMSE,
                 t_tol: float = MERGE_T_RMSE) -> list[list[int]]:
    """Union-find over transforms with entrywise RMSE below both thresholds.

    Returns groups of indices, each sorted, ordered by their first member.
    """
    parent = list(range(len(transforms)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in range(len(transforms)):
        for j in range(i + 1, len(transforms)):
            ra, rt = transform_rmse(transforms[i], transforms[j])
            if ra < a_tol and rt < t_tol:
                pi, pj = find(i), find(j)
                if pi != pj:
                    parent[max(pi, pj)] = min(pi, pj)
    groups: dict[int, list[int]] = {}
    for i in range(len(transforms)):
        groups.setdefault(find(i), []).append(i)
    return sorted(groups.values(), key=lambda g: g[0])


def merge_transforms(clusters: list[MatchCluster], seed: int = 0, diag: float | None = None,
                     inlier_tol: float = RANSAC_TOL) -> list[MatchCluster]:
    """Merge clusters with near-identical transforms and refit each union."""
    groups = merge_groups([c.transform for c in clusters])
    out = []
    for g in groups:
        if len(g) == 1:
            out.append(clusters[g[0]])
            continue
        members = np.concatenate([clusters[k].members for k in g])
        src = np.vstack([clusters[k].src for k in g])
        dst = np.vstack([clusters[k].dst for k in g])
        res = ransac_affine(src, dst, inlier_tol=inlier_tol, seed=seed, diag=diag)
        if res.transform is None:
            out.extend(clusters[k] for k in g)
            continue
        inl = res.inliers
        out.append(MatchCluster(members[inl], src[inl], dst[inl], res.transform))
    return out


def keypoint_clusters(matches: Matches, coords: np.ndarray, shape, seed: int = 0,
                      cut: float | None = None, min_corr: int = MIN_CORRESPONDENCES
                      ) -> list[MatchCluster]:
    """Cluster endpoints, estimate one transform per linked cluster pair, merge."""
    if len(matches) < min_corr:
        return []
    li, lj = cluster_keypoints(matches, coords, cut)
    coords = np.asarray(coords, np.float64)
    a = coords[matches.i]
    b = coords[matches.j]
    swap = li > lj
    lo = np.where(swap, lj, li)
    hi = np.where(swap, li, lj)
    src = np.where(swap[:, None], b, a)
    dst = np.where(swap[:, None], a, b)
    diag = float(np.hypot(*shape[:2]))
    clusters = []
    keys = sorted(set(zip(lo.tolist(), hi.tolist())))
    for ka, kb in keys:
        if ka == kb:
            continue
        sel = np.flatnonzero((lo == ka) & (hi == kb))
        if len(sel) < min_corr:
            continue
        res = ransac_affine(src[sel], dst[sel], seed=seed, diag=diag)
        if res.transform is None:
            continue
        idx = sel[res.inliers]
        clusters.append(MatchCluster(idx, src[idx], dst[idx], res.transform))
    return merge_transforms(clusters, seed=seed, diag=diag)


def _offset_normalized(gray: np.ndarray) -> np.ndarray:
    # subtracting the minimum and snapping to a 2**-16 grid makes the map
    # exactly invariant to a constant offset of 8-bit images
    g = np.asarray(gray, np.float64)
    return np.rint((g - g.min()) * 65536.0) / 65536.0


def ncc_map(a: np.ndarray, b: np.ndarray, valid: np.ndarray, window: int = NCC_WINDOW) -> np.ndarray:
    """Windowed normalized correlation; zero-variance windows score 0."""
    size = (window, window)
    ma = ndimage.uniform_filter(a, size, mode="nearest")
    mb = ndimage.uniform_filter(b, size, mode="nearest")
    cov = ndimage.uniform_filter(a * b, size, mode="nearest") - ma * mb
    va = ndimage.uniform_filter(a * a, size, mode="nearest") - ma * ma
    vb = ndimage.uniform_filter(b * b, size, mode="nearest") - mb * mb
    den = np.sqrt(np.clip(va, 0, None) * np.clip(vb, 0, None))
    eps = 1e-10
    out = np.where(den > eps, cov / np.where(den > eps, den, 1.0), 0.0)
    win_valid = ndimage.minimum_filter(valid.astype(np.uint8), size, mode="constant") > 0
    return np.where(win_valid, np.clip(out, -1.0, 1.0), 0.0)


def _endpoint_mask(points: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    m = np.zeros((h, w), bool)
    c = np.rint(np.asarray(points, np.float64)).astype(np.int64).reshape(-1, 2)
    ok = (c[:, 0] >= 0) & (c[:, 0] < w) & (c[:, 1] >= 0) & (c[:, 1] < h)
    m[c[ok, 1], c[ok, 0]] = True
    return m


def _gate_regions(binary: np.ndarray, anchors: np.ndarray, min_area: int) -> np.ndarray:
    lab, n = ndimage.label(binary, structure=EIGHT)
    if n == 0:
        return np.zeros(binary.shape, bool)
    areas = np.bincount(lab.ravel(), minlength=n + 1)
    hit = np.bincount(lab[anchors], minlength=n + 1) > 0
    keep = (areas >= min_area) & hit
    keep[0] = False
    return ndimage.binary_fill_holes(keep[lab])


def correlation_map(gray: np.ndarray, tf: AffineTransform, src_pts: np.ndarray,
                    dst_pts: np.ndarray, min_area: int = KP_MIN_AREA,
                    threshold: float = NCC_THRESHOLD) -> np.ndarray:
    """Regions where the image correlates with itself under ``tf`` (source
    side) or its inverse (target side), gated by area and match presence."""
    g = _offset_normalized(gray)
    h, w = g.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w), bool)
    truncate = (SMOOTH_SIZE // 2) / SMOOTH_SIGMA
    for t, pts in ((tf, src_pts), (tf.inverse(), dst_pts)):
        mx = t.A[0, 0] * xs + t.A[0, 1] * ys + t.t[0]
        my = t.A[1, 0] * xs + t.A[1, 1] * ys + t.t[1]
        warped, valid = sample_bilinear(g, mx, my)
        if not valid.any():
            continue
        corr = ncc_map(g, warped, valid)
        corr = ndimage.gaussian_filter(corr, SMOOTH_SIGMA, truncate=truncate, mode="nearest")
        binary = corr > threshold
        out |= _gate_regions(binary, _endpoint_mask(pts, (h, w)), min_area)
    return out


def verify_regions(mask: np.ndarray, src_pts: np.ndarray, dst_pts: np.ndarray) -> np.ndarray:
    """Keep components containing one end of a match whose other end lies in
    a different marked component."""
    lab, n = ndimage.label(mask, structure=EIGHT)
    if n == 0:
        return mask
    h, w = mask.shape

    def lookup(pts):
        c = np.rint(np.asarray(pts, np.float64)).astype(np.int64).reshape(-1, 2)
        ok = (c[:, 0] >= 0) & (c[:, 0] < w) & (c[:, 1] >= 0) & (c[:, 1] < h)
        out = np.zeros(len(c), np.int64)
        out[ok] = lab[c[ok, 1], c[ok, 0]]
        return out

    la = lookup(src_pts)
    lb = lookup(dst_pts)
    good = (la > 0) & (lb > 0) & (la != lb)
    keep = np.zeros(n + 1, bool)
    keep[la[good]] = True
    keep[lb[good]] = True
    return keep[lab]


def keypoint_map(gray: np.ndarray, clusters: list[MatchCluster],
                 min_area: int = KP_MIN_AREA) -> np.ndarray:
    h, w = np.shape(gray)
    out = np.zeros((h, w), bool)
    for cl in clusters:
        out |= correlation_map(gray, cl.transform, cl.src, cl.dst, min_area)
    if not clusters:
        return out
    src = np.vstack([c.src for c in clusters])
    dst = np.vstack([c.dst for c in clusters])
    return verify_regions(out, src, dst)
