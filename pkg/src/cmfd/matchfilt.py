"""Nearest-neighbour matching of feature rows and the shift-vector filter.

Matches are kept in a :class:`Matches` container of parallel arrays; the
pair orientation is always ``i < j`` and ``shift = coords[j] - coords[i]``.

g2NN rule
---------
For a row with sorted neighbour distances ``d_1 <= ... <= d_k`` scan
``i = 1 .. k-1`` and stop at the first ``i`` with ``d_i / d_{i+1} < ratio``
(a gap); neighbours ``1 .. i`` are accepted. If no gap occurs within the
``k`` neighbours nothing is accepted. ``0 / 0`` counts as ratio 1 (identical
copies are not a gap). With ``k = 2`` this is the plain 2NN ratio test.

    m = 0
    for i in 1 .. k-1:
        if d_i / d_{i+1} < ratio:
            m = i
            break
    accept neighbours 1 .. m
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from ._kdforest import KDForest, brute_knn
from .blockfeat import FeatureMatrix

DEFAULT_TREES = 4
DEFAULT_CHECKS = 128
DEFAULT_RATIO = 0.5
DEFAULT_KMAX = 10
DEFAULT_TAU1 = 50.0
TARGET_RECALL = 0.95
# autotune falls back to the exact scan once the leaf budget reaches this
# fraction of the rows; past it the forest costs more than a full scan
LINEAR_FRACTION = 0.25


class MatchPair(NamedTuple):
    i: int
    j: int
    dist: float
    shift: tuple[float, float]


@dataclass
class Matches:
    i: np.ndarray  # int64
    j: np.ndarray
    dist: np.ndarray  # float64
    shift: np.ndarray  # (n, 2) float64, coords[j] - coords[i]

    def __len__(self) -> int:
        return len(self.i)

    def __iter__(self) -> Iterator[MatchPair]:
        for a, b, d, s in zip(self.i.tolist(), self.j.tolist(), self.dist.tolist(),
                              self.shift.tolist()):
            yield MatchPair(a, b, d, (s[0], s[1]))

    def subset(self, mask) -> "Matches":
        return Matches(self.i[mask], self.j[mask], self.dist[mask], self.shift[mask])

    def keys(self) -> set[tuple[int, int]]:
        return set(zip(self.i.tolist(), self.j.tolist()))

    @classmethod
    def empty(cls) -> "Matches":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0),
                   np.zeros((0, 2)))

    @classmethod
    def from_pairs(cls, i, j, dist, coords) -> "Matches":
        """Orient pairs as i < j, drop self pairs and duplicates, sort by (i, j)."""
        i = np.asarray(i, np.int64)
        j = np.asarray(j, np.int64)
        dist = np.asarray(dist, np.float64)
        keep = (i != j) & (i >= 0) & (j >= 0)
        i, j, dist = i[keep], j[keep], dist[keep]
        lo = np.minimum(i, j)
        hi = np.maximum(i, j)
        order = np.lexsort((hi, lo))
        lo, hi, dist = lo[order], hi[order], dist[order]
        first = np.ones(len(lo), bool)
        first[1:] = (lo[1:] != lo[:-1]) | (hi[1:] != hi[:-1])
        lo, hi, dist = lo[first], hi[first], dist[first]
        coords = np.asarray(coords, np.float64)
        return cls(lo, hi, dist, coords[hi] - coords[lo])


class AnnIndex:
    """Randomized kd-forest over feature rows (or an exact scanner).

    ``checks`` is the leaf-point budget per query. With ``target_recall``
    set, the budget is raised from ``checks`` by doubling until exact-1NN
    agreement on a seeded sample of the rows reaches the target, or the
    index switches to an exact scan when the budget grows past
    ``LINEAR_FRACTION`` of the rows.
    """

    def __init__(self, rows: np.ndarray, trees: int = DEFAULT_TREES,
                 checks: int = DEFAULT_CHECKS, seed: int = 0, exact: bool = False,
                 target_recall: float | None = None, tune_sample: int = 200):
        rows = np.ascontiguousarray(rows)
        if rows.ndim != 2 or len(rows) < 2:
            raise ValueError(f"an index needs at least 2 rows, got shape {rows.shape}")
        if rows.dtype not in (np.float32, np.float64):
            rows = rows.astype(np.float64)
        self.rows = rows
        self.trees = int(trees)
        self.checks = int(checks)
        self.exact = bool(exact)
        self.seed = int(seed)
        self.tuned_recall: float | None = None
        self._forest = None if self.exact else KDForest(rows, self.trees, self.seed)
        if target_recall is not None and not self.exact:
            self._autotune(float(target_recall), tune_sample)

    def __len__(self) -> int:
        return len(self.rows)

    def _autotune(self, target: float, sample: int) -> None:
        rng = np.random.default_rng(self.seed + 1)
        ids = np.sort(rng.choice(len(self.rows), size=min(sample, len(self.rows)), replace=False))
        exact_i, exact_d = brute_knn(self.rows, self.rows[ids], ids, 1)
        while True:
            got_i, got_d = self._forest.query(self.rows[ids], 1, self.checks, ids)
            # a tie at the same distance is as good as the exact answer
            recall = float(np.mean(got_d[:, 0] <= exact_d[:, 0]))
            if recall >= target:
                self.tuned_recall = recall
                return
            self.checks *= 2
            if self.checks >= LINEAR_FRACTION * len(self.rows):
                self.exact = True
                self._forest = None
                self.tuned_recall = 1.0
                return

    def query(self, queries: np.ndarray, k: int, self_ids=None) -> tuple[np.ndarray, np.ndarray]:
        """k nearest rows for each query: (indices, euclidean distances).

        ``self_ids[q]`` (if given) is excluded from the answer of query ``q``;
        missing neighbours are reported as index -1, distance inf.
        """
        queries = np.ascontiguousarray(queries, dtype=self.rows.dtype)
        if self_ids is None:
            self_ids = np.full(len(queries), -1, np.int64)
        self_ids = np.asarray(self_ids, np.int64)
        k = int(k)
        if self.exact:
            return brute_knn(self.rows, queries, self_ids, k)
        return self._forest.query(queries, k, self.checks, self_ids)

    def query_rows(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """k nearest other rows of every indexed row."""
        ids = np.arange(len(self.rows), dtype=np.int64)
        return self.query(self.rows, k, ids)


def _rows_of(features) -> np.ndarray:
    return features.rows if isinstance(features, FeatureMatrix) else np.asarray(features)


def build_index(features, trees: int = DEFAULT_TREES, checks: int = DEFAULT_CHECKS,
                seed: int = 0, exact: bool = False,
                target_recall: float | None = TARGET_RECALL) -> AnnIndex:
    """Index the rows of a FeatureMatrix (or a plain 2-D array).

    By default the leaf budget starts at ``checks`` and is raised until a
    sampled exact-1NN agreement of 95% is reached; pass
    ``target_recall=None`` to use ``checks`` as a fixed budget.
    """
    return AnnIndex(_rows_of(features), trees, checks, seed, exact, target_recall)


def match_1nn(features: FeatureMatrix, index: AnnIndex) -> Matches:
    nn_i, nn_d = index.query_rows(1)
    src = np.arange(len(index), dtype=np.int64)
    return Matches.from_pairs(src, nn_i[:, 0], nn_d[:, 0], features.coords)


def g2nn_accept_count(dists: np.ndarray, ratio: float) -> int:
    """Number of leading neighbours accepted for one sorted distance row."""
    k = len(dists)
    for i in range(k - 1):
        a, b = dists[i], dists[i + 1]
        if not np.isfinite(b):
            return 0
        r = 1.0 if b == 0.0 else a / b
        if r < ratio:
            return i + 1
    return 0


def g2nn_counts(dists: np.ndarray, ratio: float) -> np.ndarray:
    """Vectorized :func:`g2nn_accept_count` over an (n, k) distance array."""
    d = np.asarray(dists, np.float64)
    a, b = d[:, :-1], d[:, 1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(b == 0.0, 1.0, a / b)
    r = np.where(np.isfinite(b), r, np.inf)  # running out of neighbours is no gap
    gap = r < ratio
    # a missing neighbour before the first gap also ends the scan
    stop = gap | ~np.isfinite(b)
    first = np.argmax(stop, axis=1)
    has = stop[np.arange(len(d)), first]
    ok = has & gap[np.arange(len(d)), first]
    return np.where(ok, first + 1, 0)


def match_g2nn(features: FeatureMatrix, index: AnnIndex, ratio: float = DEFAULT_RATIO,
               k_max: int = DEFAULT_KMAX) -> Matches:
    if k_max < 2:
        raise ValueError(f"g2NN needs k_max >= 2, got {k_max}")
    k = min(int(k_max), len(index) - 1)
    if k < 2:
        # two rows: a single neighbour cannot be ratio-tested against anything
        return Matches.empty()
    nn_i, nn_d = index.query_rows(k)
    m = g2nn_counts(nn_d, ratio)
    take = np.arange(k)[None, :] < m[:, None]
    src = np.broadcast_to(np.arange(len(index))[:, None], nn_i.shape)
    return Matches.from_pairs(src[take], nn_i[take], nn_d[take], features.coords)


def filter_min_shift(matches: Matches, tau1: float = DEFAULT_TAU1) -> Matches:
    """Keep pairs whose shift length is at least ``tau1`` pixels."""
    norm = np.hypot(matches.shift[:, 0], matches.shift[:, 1])
    return matches.subset(norm >= tau1)


def match_features(features: FeatureMatrix, index: AnnIndex, matcher: str = "1nn",
                   ratio: float = DEFAULT_RATIO, k_max: int = DEFAULT_KMAX) -> Matches:
    if matcher == "1nn":
        return match_1nn(features, index)
    if matcher == "g2nn":
        return match_g2nn(features, index, ratio, k_max)
    raise ValueError(f"unknown matcher {matcher!r}")
