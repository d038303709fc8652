import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from cmfd import tamper

import oracles
from cmfd.tamper import BACKGROUND, BOUNDARY, COPIED, ForgeryCase, PasteOp, Snippet


def _base(h=128, w=128, seed=0):
    return np.random.default_rng(seed).random((h, w, 3))


def _case(snips, pastes, post=None, seed=0):
    return ForgeryCase("b", snips, pastes, post or {}, seed)


def test_single_translation_two_congruent_regions():
    snip = Snippet(np.ones((20, 24)), (10, 10))
    res = tamper.splice_detailed(_base(), _case({"s": snip}, [PasteOp("s", (70, 80))]))
    src, tgt = res.source_copied[0], res.target_copied[0]
    assert src.sum() == tgt.sum() == 20 * 24
    ys, xs = np.nonzero(src)
    assert tgt[ys + 70, xs + 60].all()
    assert (res.labels == COPIED).sum() == 2 * 20 * 24
    # copied content equals its source
    assert np.array_equal(res.image[80:100, 70:94], res.image[10:30, 10:34])


def test_occlusion_drops_source_too():
    a = Snippet(np.ones((20, 20)), (5, 5))
    b = Snippet(np.ones((20, 20)), (5, 60))
    # B covers the right half of A's target
    case = _case({"a": a, "b": b}, [PasteOp("a", (60, 5), order=0), PasteOp("b", (70, 5), order=1)])
    res = tamper.splice_detailed(_base(), case)
    ta, sa = res.target_copied[0], res.source_copied[0]
    assert ta[5:25, 60:70].all() and not ta[5:25, 70:80].any()
    # the hidden half of A's target is dropped from A's source labels too
    assert sa[5:25, 5:15].all() and not sa[5:25, 15:25].any()
    assert res.target_copied[1][5:25, 70:90].all()
    oracle = oracles.translation_labels(128, 128, {"a": (np.ones((20, 20), bool), (5, 5)),
                                            "b": (np.ones((20, 20), bool), (5, 60))},
                                 [("a", (60, 5)), ("b", (70, 5))])
    assert np.array_equal(res.labels, oracle)


def test_rotation_matches_mask_warp_oracle():
    h = w = 128
    snip = Snippet(np.ones((24, 24)), (10, 10))
    op = PasteOp("s", (80, 80), rotation=10.0)
    res = tamper.splice_detailed(_base(h, w), _case({"s": snip}, [op]))
    a, t = tamper.paste_affine(op, snip)
    canvas = np.zeros((h, w))
    canvas[10:34, 10:34] = 1.0
    inv = np.linalg.inv(a)
    # ndimage works in (row, col): input = M @ output + offset
    m = inv[::-1, ::-1]
    offset = -(m @ t[::-1])
    warped = ndimage.affine_transform(canvas, m, offset=offset, order=1, cval=0.0)
    expect = warped >= tamper.OPAQUE
    assert np.array_equal(res.target_copied[0], expect)


def test_noise_examples():
    img = np.full((1000, 1000), 0.5)
    assert np.array_equal(tamper.add_gaussian_noise(img, 0.0, 1), img)
    out = tamper.add_gaussian_noise(img, 0.1, 7)
    assert 0.099 <= out.std() <= 0.101
    assert np.array_equal(out, tamper.add_gaussian_noise(img, 0.1, 7))
    with pytest.raises(ValueError):
        tamper.add_gaussian_noise(img, -0.1, 0)


def test_multi_paste_five_copies():
    base = _base(512, 512)
    case = tamper.multi_paste_case(base, 64, 5, seed=3)
    assert len(case.pastes) == 5
    snip = case.snippets["block"]
    pts = [snip.anchor] + [p.target for p in case.pastes]
    for i in range(6):
        for j in range(i + 1, 6):
            assert np.hypot(pts[i][0] - pts[j][0], pts[i][1] - pts[j][1]) >= 50
    _, labels = tamper.splice(base, case)
    assert (labels == COPIED).sum() == 6 * 64 * 64


def test_multi_paste_exact_fit():
    base = _base(64, 194)
    case = tamper.multi_paste_case(base, (0, 0, 64), 2, seed=0)
    assert sorted(p.target for p in case.pastes) == [(65, 0), (130, 0)]
    with pytest.raises(tamper.TamperError):
        tamper.multi_paste_case(_base(64, 190), (0, 0, 64), 2, seed=0)
    with pytest.raises(tamper.TamperError):
        tamper.multi_paste_case(base, 64, 1, seed=0)


def test_errors():
    snip = Snippet(np.ones((8, 8)), (0, 0))
    with pytest.raises(tamper.TamperError):
        tamper.splice(_base(), _case({"s": snip}, [PasteOp("s", (500, 500))]))
    with pytest.raises(tamper.TamperError):
        tamper.splice(_base(), _case({"s": snip}, [PasteOp("x", (50, 50))]))
    with pytest.raises(tamper.TamperError):
        PasteOp("s", (0, 0), scale=0)
    with pytest.raises(tamper.TamperError):
        Snippet(np.zeros((4, 4)), (0, 0))


@settings(max_examples=25, deadline=None)
@given(st.integers(6, 30), st.integers(6, 30), st.integers(0, 2**31 - 1))
def test_translation_equal_counts(sh, sw, seed):
    rng = np.random.default_rng(seed)
    alpha = (rng.random((sh, sw)) < 0.8).astype(float)
    alpha[0, 0] = 1.0
    snip = Snippet(alpha, (2, 2))
    tx, ty = int(rng.integers(40, 128 - sw)), int(rng.integers(40, 128 - sh))
    res = tamper.splice_detailed(_base(), _case({"s": snip}, [PasteOp("s", (tx, ty))]))
    assert res.source_copied[0].sum() == res.target_copied[0].sum()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_splice_deterministic_and_exhaustive(seed):
    rng = np.random.default_rng(seed)
    snip = Snippet(rng.random((16, 16)), (4, 4))
    op = PasteOp("s", (int(rng.integers(30, 100)), int(rng.integers(30, 100))),
                 rotation=float(rng.uniform(-30, 30)), scale=float(rng.uniform(0.8, 1.2)),
                 noise_sigma=0.02)
    case = _case({"s": snip}, [op], seed=seed)
    img1, lab1 = tamper.splice(_base(), case)
    img2, lab2 = tamper.splice(_base(), case)
    assert np.array_equal(img1, img2) and np.array_equal(lab1, lab2)
    assert set(np.unique(lab1)) <= {BACKGROUND, COPIED, BOUNDARY}


def test_gt_independent_of_jpeg():
    snip = Snippet(np.ones((20, 20)), (5, 5))
    plain = _case({"s": snip}, [PasteOp("s", (60, 60))])
    jpeg = _case({"s": snip}, [PasteOp("s", (60, 60))], {"jpeg_quality": 70})
    _, lab_plain, data_plain = tamper.render_case(_base(), plain)
    _, lab_jpeg, data_jpeg = tamper.render_case(_base(), jpeg)
    assert data_plain is None and data_jpeg is not None
    assert np.array_equal(lab_plain, lab_jpeg)


def test_gt_encoding_roundtrip():
    labels = np.array([[0, 1, 2]], np.int8)
    enc = tamper.encode_gt(labels)
    assert enc.tolist() == [[0, 255, 128]]
    assert np.array_equal(tamper.decode_gt(enc), labels)


def test_case_json_roundtrip():
    snip = Snippet(np.round(np.random.default_rng(0).random((9, 7)) * 255) / 255, (3, 4), "rough")
    case = _case({"s": snip}, [PasteOp("s", (50, 60), rotation=4.0, scale=1.05, order=2)],
                 {"jpeg_quality": 80}, seed=5)
    back = ForgeryCase.from_json(json.loads(json.dumps(case.to_json())))
    assert back.pastes == case.pastes and back.global_post == case.global_post
    assert np.array_equal(back.snippets["s"].alpha, snip.alpha)
    assert np.array_equal(tamper.splice(_base(), back)[1], tamper.splice(_base(), case)[1])
