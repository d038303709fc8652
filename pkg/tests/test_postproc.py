import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmfd import corpus
from cmfd import postproc as pp
from cmfd.imgio import to_grayscale
from cmfd.matchfilt import Matches
from cmfd.postproc import AffineTransform
from cmfd.tamper import BOUNDARY, COPIED


def _block_pairs(x0, y0, n, fn):
    """Matches between a grid of n x n block centres and their images under fn."""
    src = np.array([[x0 + 7.5 + dx, y0 + 7.5 + dy] for dy in range(n) for dx in range(n)])
    dst = fn(src)
    coords = np.vstack([src, dst])
    k = len(src)
    return Matches.from_pairs(np.arange(k), np.arange(k) + k, np.zeros(k), coords), coords


def _rot(deg):
    th = np.deg2rad(deg)
    return np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])


# ---------------------------------------------------------------- SATS

def test_sats_translation_cluster():
    m, coords = _block_pairs(20, 30, 49, lambda s: s + [150.0, 90.0])
    cl = pp.sats(m, coords, tau2=50)
    assert len(cl) == 1
    assert cl[0].h == 2401
    assert np.allclose(cl[0].transform.A, np.eye(2), atol=1e-9)
    assert np.allclose(cl[0].transform.t, [150.0, 90.0], atol=1e-9)


def test_sats_spurious_pairs():
    rng = np.random.default_rng(0)
    coords = rng.integers(0, 500, (20, 2)).astype(float) + 7.5
    m = Matches.from_pairs(np.arange(10), np.arange(10, 20), np.zeros(10), coords)
    assert pp.sats(m, coords, tau2=50) == []


def test_sats_rotated_copy():
    c = np.array([60.0, 60.0])
    shift = np.array([200.0, 120.0])
    a = _rot(5.0)
    # block centres sit on the pixel grid: matched targets are rounded positions
    m, coords = _block_pairs(40, 40, 41, lambda s: np.floor((s - c) @ a.T + c + shift) + 0.5)
    cl = max(pp.sats(m, coords, tau2=50), key=lambda k: k.h)
    angle = np.rad2deg(np.arctan2(cl.transform.A[1, 0], cl.transform.A[0, 0]))
    assert abs(angle - 5.0) < 1.0
    planted_t = c + shift - a @ c
    assert np.linalg.norm(cl.transform.t - planted_t) < 2.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(5, 300))
def test_sats_subset_and_threshold(seed, tau2):
    rng = np.random.default_rng(seed)
    m1, c1 = _block_pairs(10, 10, 20, lambda s: s + [100.0, 60.0])
    noise = rng.random((60, 2)) * 300
    coords = np.vstack([c1, noise])
    k = len(c1)
    i = np.concatenate([m1.i, k + np.arange(30)])
    j = np.concatenate([m1.j, k + 30 + np.arange(30)])
    m = Matches.from_pairs(i, j, np.zeros(len(i)), coords)
    for cl in pp.sats(m, coords, tau2=tau2):
        assert cl.h >= tau2
        assert set(cl.members.tolist()) <= set(range(len(m)))
        assert len(set(cl.members.tolist())) == cl.h


# ---------------------------------------------------------------- block maps

def test_blocks_to_map():
    assert not pp.blocks_to_map([], (100, 100), 16, 10).any()
    m, coords = _block_pairs(20, 30, 49, lambda s: s + [150.0, 90.0])
    cl = pp.sats(m, coords, tau2=50)
    mask = pp.blocks_to_map(cl, (300, 300), 16, 1000)
    assert mask[30:94, 20:84].all() and mask[120:184, 170:234].all()
    assert mask.sum() == 2 * 64 * 64
    # a 2-pair cluster paints two 16x16 squares per side, far below tau3
    small = pp.MatchCluster(cl[0].members[:2], cl[0].src[:2], cl[0].dst[:2], cl[0].transform)
    assert not pp.blocks_to_map([small], (300, 300), 16, 1000).any()
    centres = pp.blocks_to_map(cl, (300, 300), 16, 1000, center_only=True)
    assert centres.sum() == 2 * 2401


# ---------------------------------------------------------------- keypoint clustering

def test_cluster_points_examples():
    rng = np.random.default_rng(1)
    blobs = np.vstack([rng.normal(0, 3, (20, 2)), rng.normal(0, 3, (20, 2)) + [200, 0]])
    assert len(set(pp.cluster_points(blobs, 25).tolist())) == 2
    chain = np.stack([np.arange(30) * 10.0, np.zeros(30)], axis=1)
    assert len(set(pp.cluster_points(chain, 25).tolist())) == 1


def _single_link_literal(points, cut):
    clusters = [[k] for k in range(len(points))]
    while True:
        best = None
        for a, b in itertools.combinations(range(len(clusters)), 2):
            d = min(np.linalg.norm(points[p] - points[q]) for p in clusters[a] for q in clusters[b])
            if best is None or d < best[0]:
                best = (d, a, b)
        if best is None or best[0] > cut:
            break
        _, a, b = best
        clusters[a] += clusters.pop(b)
    return {frozenset(c) for c in clusters}


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 30))
def test_cluster_points_vs_literal(seed, n):
    pts = np.random.default_rng(seed).random((n, 2)) * 150
    lab = pp.cluster_points(pts, 25.0)
    got = {frozenset(np.flatnonzero(lab == k).tolist()) for k in set(lab.tolist())}
    assert got == _single_link_literal(pts, 25.0)


def test_cluster_keypoints_cut_rule():
    coords = np.array([[0.0, 0.0], [50.0, 0.0], [300.0, 0.0], [350.0, 0.0]])
    m = Matches.from_pairs([0, 1], [2, 3], [0.0, 0.0], coords)
    li, lj = pp.cluster_keypoints(m, coords)  # < 100 pairs: 75 px cut
    assert li[0] == li[1] and lj[0] == lj[1] and li[0] != lj[0]
    li, lj = pp.cluster_keypoints(m, coords, cut=25)
    assert li[0] != li[1]


# ---------------------------------------------------------------- RANSAC

def _planted(seed, n=100, outliers=0.3, deg=10.0, scale=1.1):
    rng = np.random.default_rng(seed)
    a = scale * _rot(deg)
    t = np.array([40.0, -25.0])
    src = rng.random((n, 2)) * 200
    dst = src @ a.T + t
    k = int(n * outliers)
    out = rng.choice(n, k, replace=False)
    dst[out] = rng.random((k, 2)) * 300
    return src, dst, a, t


def test_ransac_exact():
    src, dst, a, t = _planted(0, outliers=0.0)
    res = pp.ransac_affine(src, dst, seed=0)
    assert np.abs(res.transform.A - a).max() < 1e-9 and np.abs(res.transform.t - t).max() < 1e-9
    assert res.inliers.all()


def test_ransac_degenerate():
    src = np.stack([np.arange(4.0), np.arange(4.0)], axis=1)
    res = pp.ransac_affine(src, src + 5, seed=0)
    assert res.transform is None and not res.inliers.any()
    assert pp.ransac_affine(src[:3], src[:3], seed=0).transform is None


@pytest.mark.parametrize("seed", range(10))
def test_ransac_planted(seed):
    src, dst, a, t = _planted(seed)
    res = pp.ransac_affine(src, dst, seed=seed)
    assert res.inliers.sum() >= 60
    scale = np.sqrt(abs(np.linalg.det(res.transform.A)))
    angle = np.rad2deg(np.arctan2(res.transform.A[1, 0], res.transform.A[0, 0]))
    assert abs(scale - 1.1) / 1.1 < 0.02 and abs(angle - 10) / 10 < 0.02
    again = pp.ransac_affine(src, dst, seed=seed)
    assert np.array_equal(again.transform.A, res.transform.A)
    # the returned inlier set is exactly the consensus of the returned transform
    assert np.array_equal(pp.residuals(res.transform, src, dst) <= pp.RANSAC_TOL, res.inliers)


def test_gold_standard_exact():
    src, dst, a, t = _planted(3, outliers=0.0)
    tf = pp.affine_gold_standard(src, dst)
    assert np.allclose(tf.A, a, atol=1e-9) and np.allclose(tf.t, t, atol=1e-7)


def test_plausibility():
    assert not AffineTransform(np.eye(2) * 5, np.zeros(2)).is_plausible()
    assert not AffineTransform(np.eye(2) * 0.2, np.zeros(2)).is_plausible()
    assert not AffineTransform(np.eye(2), np.array([300.0, 400.0])).is_plausible(diag=100)
    assert AffineTransform(np.eye(2), np.array([30.0, 40.0])).is_plausible(diag=100)


# ---------------------------------------------------------------- merging

def _tf(tx, a=None):
    return AffineTransform(np.eye(2) if a is None else a, np.array([tx, 0.0]))


def test_merge_examples():
    assert pp.merge_groups([_tf(10), _tf(10)]) == [[0, 1]]
    # RMSE over two entries: a 20 px shift in x alone gives sqrt(200) > 10
    assert pp.merge_groups([_tf(10), _tf(30)]) == [[0], [1]]
    assert pp.merge_groups([_tf(0), _tf(12), _tf(24)]) == [[0, 1, 2]]
    assert pp.merge_groups([_tf(0), _tf(0, np.eye(2) * 1.1)]) == [[0], [1]]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 60), min_size=1, max_size=12))
def test_merge_partition(xs):
    tfs = [_tf(x) for x in xs]
    groups = pp.merge_groups(tfs)
    flat = sorted(k for g in groups for k in g)
    assert flat == list(range(len(xs)))
    where = {k: gi for gi, g in enumerate(groups) for k in g}
    for i, j in itertools.combinations(range(len(xs)), 2):
        ra, rt = pp.transform_rmse(tfs[i], tfs[j])
        if ra < pp.MERGE_A_RMSE and rt < pp.MERGE_T_RMSE:
            assert where[i] == where[j]


def test_merge_transforms_refits():
    src, dst, a, t = _planted(4, outliers=0.0)
    half = len(src) // 2
    c1 = pp.MatchCluster(np.arange(half), src[:half], dst[:half], AffineTransform(a, t))
    c2 = pp.MatchCluster(np.arange(half, len(src)), src[half:], dst[half:],
                         AffineTransform(a, t + [1.0, 0.0]))
    out = pp.merge_transforms([c1, c2])
    assert len(out) == 1 and out[0].h == len(src)


# ---------------------------------------------------------------- correlation maps

def _texture(h, w, seed):
    from scipy import ndimage
    rng = np.random.default_rng(seed)
    return np.clip(ndimage.gaussian_filter(rng.random((h, w)), 1.0) * 2 - 0.5, 0, 1)


def test_correlation_identity():
    img = np.full((120, 160), 0.5)
    img[:, :80] = _texture(120, 80, 0)
    pts = np.array([[40.0, 60.0]])
    m = pp.correlation_map(img, AffineTransform(np.eye(2), np.zeros(2)), pts, pts)
    assert m[10:110, 10:70].all()
    assert not m[:, 90:].any()


@pytest.mark.parametrize("k", range(10))
def test_correlation_translation_copy(k):
    cfg = corpus.validate_config({"cases": 10})
    setup = corpus.setup_case(cfg, k)
    case = next(c for name, _, _, c, _ in corpus._variant_cases(setup, cfg) if name == "plain")
    img, labels, _ = corpus.render_variant(setup.base, case)
    (ax, ay), (tx, ty) = setup.snippet.anchor, setup.target
    tf = AffineTransform(np.eye(2), np.array([tx - ax, ty - ay], float))
    ys, xs = np.nonzero(setup.snippet.alpha > 0.99)
    pick = np.random.default_rng(k).choice(len(xs), 10, replace=False)
    src = np.stack([xs[pick] + ax, ys[pick] + ay], axis=1).astype(float)
    m = pp.correlation_map(to_grayscale(img), tf, src, tf.apply(src))
    m = pp.verify_regions(m, src, tf.apply(src))
    copied = labels == COPIED
    false = m & (labels != BOUNDARY) & ~copied
    assert (m & copied).sum() >= 0.9 * copied.sum()
    assert false.sum() <= 0.05 * m.sum()


def test_correlation_constant_image():
    tf = AffineTransform(np.eye(2), np.array([50.0, 0.0]))
    pts = np.array([[20.0, 20.0]])
    assert not pp.correlation_map(np.full((100, 100), 0.3), tf, pts, tf.apply(pts)).any()


def test_correlation_outside():
    tf = AffineTransform(np.eye(2), np.array([5000.0, 0.0]))
    pts = np.array([[20.0, 20.0]])
    assert not pp.correlation_map(_texture(60, 60, 3), tf, pts, pts).any()


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 60))
def test_correlation_offset_invariance(k):
    img = np.round(_texture(120, 160, 4) * 180) / 255
    img[70:110, 100:140] = img[10:50, 20:60]
    tf = AffineTransform(np.eye(2), np.array([80.0, 60.0]))
    src = np.array([[30.0, 20.0], [40.0, 35.0]])
    a = pp.correlation_map(img, tf, src, tf.apply(src))
    b = pp.correlation_map(img + k / 255, tf, src, tf.apply(src))
    assert np.array_equal(a, b)
