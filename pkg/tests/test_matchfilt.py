import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmfd import matchfilt as mf
from cmfd._kdforest import brute_knn
from cmfd.blockfeat import FeatureMatrix


def _fm(rows, coords=None):
    rows = np.asarray(rows, float)
    if coords is None:
        coords = np.stack([np.arange(len(rows)) * 100.0, np.zeros(len(rows))], axis=1)
    return FeatureMatrix("t", rows, coords)


def _brute(rows):
    d = np.linalg.norm(rows[:, None] - rows[None], axis=2)
    np.fill_diagonal(d, np.inf)
    return d


def test_two_rows():
    fm = _fm([[0.0, 0.0], [3.0, 4.0]])
    idx = mf.build_index(fm)
    i, d = idx.query_rows(1)
    assert i[:, 0].tolist() == [1, 0] and np.allclose(d[:, 0], 5.0)
    with pytest.raises(ValueError):
        mf.build_index(_fm([[1.0, 2.0]]))


def test_duplicates_distance_zero():
    rows = np.random.default_rng(0).random((50, 8))
    rows[30] = rows[7]
    idx = mf.build_index(_fm(rows))
    i, d = idx.query_rows(1)
    assert i[7, 0] == 30 and i[30, 0] == 7 and d[7, 0] == 0.0


def test_query_never_returns_self():
    rows = np.random.default_rng(1).random((300, 6))
    i, _ = mf.build_index(_fm(rows), checks=16, target_recall=None).query_rows(5)
    assert not (i == np.arange(300)[:, None]).any()


def test_collinear_1nn():
    fm = _fm([[0.0], [1.0], [11.0]])
    m = mf.match_1nn(fm, mf.build_index(fm, exact=True))
    # 0 and 1 pair up; 2 pairs with its nearer neighbour 1
    assert m.keys() == {(0, 1), (1, 2)}


def test_duplicate_region_matches_twin():
    rng = np.random.default_rng(2)
    rows = rng.random((100, 16))
    coords = rng.random((100, 2)) * 100
    fm = _fm(np.vstack([rows, rows]), np.vstack([coords, coords + [200.0, 0.0]]))
    m = mf.match_1nn(fm, mf.build_index(fm))
    assert m.keys() == {(k, k + 100) for k in range(100)}
    assert np.all(m.dist == 0) and np.allclose(m.shift, [200.0, 0.0])


def test_1nn_vs_brute():
    rows = np.random.default_rng(3).random((2000, 16))
    fm = _fm(rows, np.random.default_rng(4).random((2000, 2)) * 500)
    m = mf.match_1nn(fm, mf.build_index(fm))
    nn = _brute(rows).argmin(axis=1)
    exact = mf.Matches.from_pairs(np.arange(2000), nn, np.zeros(2000), fm.coords).keys()
    # pairs agree on >= 95% of rows
    got_nn = {}
    for a, b in m.keys():
        got_nn.setdefault(a, set()).add(b)
        got_nn.setdefault(b, set()).add(a)
    agree = np.mean([nn[r] in got_nn.get(r, set()) for r in range(2000)])
    assert agree >= 0.95
    assert len(m.keys() & exact) >= 0.95 * len(exact)


def test_g2nn_examples():
    assert mf.g2nn_accept_count(np.array([1.0, 2.5]), 0.5) == 1
    assert mf.g2nn_accept_count(np.array([1.0, 1.9]), 0.5) == 0
    assert mf.g2nn_accept_count(np.array([1.0, 1.1, 10.0]), 0.5) == 2
    assert mf.g2nn_accept_count(np.array([0.0, 0.0, 0.0, 0.0, 0.0, 3.0, 3.1]), 0.5) == 5
    assert mf.g2nn_accept_count(np.array([1.0, np.inf]), 0.5) == 0


def _g2nn_literal(d, ratio):
    """The rule exactly as written: first gap d_i / d_{i+1} < ratio ends the scan."""
    for i in range(1, len(d)):
        di, dn = d[i - 1], d[i]
        if dn == np.inf:
            return 0
        r = 1.0 if dn == 0 else di / dn
        if r < ratio:
            return i
    return 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=2, max_size=10), st.floats(0.05, 1.0))
def test_g2nn_counts_vs_literal(vals, ratio):
    d = np.sort(np.array(vals))
    assert mf.g2nn_accept_count(d, ratio) == _g2nn_literal(d, ratio)
    assert mf.g2nn_counts(d[None], ratio)[0] == _g2nn_literal(d, ratio)


def test_g2nn_five_copies():
    rng = np.random.default_rng(5)
    rows = rng.random((40, 8))
    rows = np.vstack([rows] + [rows[:1]] * 5)  # row 0 plus five copies
    fm = _fm(rows)
    m = mf.match_g2nn(fm, mf.build_index(fm, exact=True))
    group = [0] + list(range(40, 45))
    expect = {(a, b) for a in group for b in group if a < b}
    assert expect <= m.keys()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_g2nn_small_ratio_subset_of_1nn(seed):
    rows = np.random.default_rng(seed).random((60, 4))
    rows[10] = rows[3] + 1e-9
    fm = _fm(rows)
    idx = mf.build_index(fm, exact=True)
    assert mf.match_g2nn(fm, idx, ratio=1e-6).keys() <= mf.match_1nn(fm, idx).keys()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.2, 0.9))
def test_g2nn_k2_is_2nn(seed, ratio):
    rows = np.random.default_rng(seed).random((60, 3))
    fm = _fm(rows)
    m = mf.match_g2nn(fm, mf.build_index(fm, exact=True), ratio, k_max=2)
    d = _brute(rows)
    order = np.argsort(d, axis=1)
    expect = set()
    for r in range(60):
        d1, d2 = d[r, order[r, 0]], d[r, order[r, 1]]
        if d1 / d2 < ratio:
            expect.add(tuple(sorted((r, int(order[r, 0])))))
    assert m.keys() == expect


def test_g2nn_kmax_check():
    fm = _fm(np.random.default_rng(0).random((5, 2)))
    with pytest.raises(ValueError):
        mf.match_g2nn(fm, mf.build_index(fm), k_max=1)


def test_filter_min_shift_examples():
    coords = np.array([[0.0, 0.0], [30.0, 30.0], [50.0, 0.0]])
    m = mf.Matches.from_pairs([0, 0], [1, 2], [0.0, 0.0], coords)
    kept = mf.filter_min_shift(m, 50)
    assert kept.keys() == {(0, 2)}


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 150))
def test_filter_min_shift_oracle(seed, tau1):
    rng = np.random.default_rng(seed)
    coords = rng.random((30, 2)) * 200
    ii, jj = np.triu_indices(30, 1)
    m = mf.Matches.from_pairs(ii, jj, np.zeros(len(ii)), coords)
    out = mf.filter_min_shift(m, tau1)
    expect = {(a, b) for a, b in m.keys() if np.linalg.norm(coords[b] - coords[a]) >= tau1}
    assert out.keys() == expect
    assert mf.filter_min_shift(out, tau1).keys() == out.keys()
    # shift antisymmetry: stored shift is coords[j] - coords[i]
    for p in out:
        assert np.allclose(p.shift, coords[p.j] - coords[p.i])
        assert np.allclose(-np.asarray(p.shift), coords[p.i] - coords[p.j])


def test_self_clone_matches_at_zero():
    rows = np.random.default_rng(6).random((200, 12))
    coords = np.random.default_rng(7).random((200, 2)) * 40
    fm = _fm(np.vstack([rows, rows]), np.vstack([coords, coords + [0.0, 60.0]]))
    m = mf.filter_min_shift(mf.match_1nn(fm, mf.build_index(fm)), 50)
    assert m.keys() == {(k, k + 200) for k in range(200)}


def test_exact_and_forest_agree_with_brute_knn():
    rows = np.random.default_rng(8).random((500, 10))
    ids = np.arange(500)
    bi, bd = brute_knn(rows, rows, ids, 3)
    ei, ed = mf.build_index(rows, exact=True).query_rows(3)
    assert np.array_equal(bi, ei) and np.allclose(bd, ed)
    d = _brute(rows)
    assert np.allclose(np.sort(d, axis=1)[:, :3], bd)


def test_autotune_reaches_target():
    rows = np.random.default_rng(9).random((3000, 64))
    idx = mf.build_index(rows, checks=8)
    assert idx.tuned_recall >= 0.95 and idx.checks >= 8
