import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmfd import evalbench as eb
from cmfd.evalbench import CalibrationSample, ConfusionCounts, RunRecord
from cmfd.pipeline import TAU2_DEFAULTS
from cmfd.tamper import BACKGROUND, BOUNDARY, COPIED

from reference_values import PLAIN_IMAGE_LEVEL


def test_metrics_examples():
    m = eb.metrics(ConfusionCounts(8, 1, 0))
    assert round(m.precision, 4) == 0.8889 and m.recall == 1.0 and round(m.f1, 4) == 0.9412
    m = eb.metrics(ConfusionCounts())
    assert m.precision is None and m.recall is None and m.f1 is None
    assert round(eb.f1_score(0.9231, 1.0), 4) == 0.9600
    assert eb.f1_score(0.0, 0.0) is None
    assert eb.fmt_metric(None) == "n/a"


@pytest.mark.parametrize("method", sorted(PLAIN_IMAGE_LEVEL))
def test_reference_rows_f1(method):
    p, r, f1, _ = PLAIN_IMAGE_LEVEL[method]
    assert abs(100 * eb.f1_score(p / 100, r / 100) - f1) <= 0.01


@pytest.mark.parametrize("method", sorted(set(PLAIN_IMAGE_LEVEL) - {"surf"}))
def test_tau2_defaults_follow_reference(method):
    assert TAU2_DEFAULTS[method] == PLAIN_IMAGE_LEVEL[method][3]


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0)


@settings(max_examples=200)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f1_between_p_and_r(tp, fp, fn):
    m = eb.metrics(ConfusionCounts(tp, fp, fn))
    if m.f1 is not None:
        assert min(m.precision, m.recall) - 1e-12 <= m.f1 <= max(m.precision, m.recall) + 1e-12


def test_image_level_decision():
    assert not eb.image_level_decision(np.zeros((50, 50), bool), 1000)
    m = np.zeros((100, 100), bool)
    m[:10, :100] = True
    m[10, 0] = True
    assert m.sum() == 1001 and eb.image_level_decision(m, 1000)
    m = np.zeros((100, 100), bool)
    m[:20, :30] = m[50:70, 50:80] = True
    assert not eb.image_level_decision(m, 1000)
    # diagonal contact joins components under 8-connectivity
    d = np.eye(20, dtype=bool)
    assert eb.largest_component(d) == 20


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_image_level_monotone(seed):
    rng = np.random.default_rng(seed)
    m = rng.random((40, 40)) < 0.4
    more = m | (rng.random((40, 40)) < 0.1)
    tau3 = int(rng.integers(0, 400))
    assert not (eb.image_level_decision(m, tau3) and not eb.image_level_decision(more, tau3))


def _labels(rng, shape):
    return rng.choice([BACKGROUND, COPIED, BOUNDARY], size=shape, p=[0.6, 0.3, 0.1]).astype(np.uint8)


def test_pixel_counts_examples():
    rng = np.random.default_rng(0)
    gt = _labels(rng, (30, 40))
    copied = gt == COPIED
    assert eb.pixel_level_counts(copied, gt) == ConfusionCounts(int(copied.sum()), 0, 0)
    assert eb.pixel_level_counts(np.zeros_like(copied), gt) == ConfusionCounts(0, 0, int(copied.sum()))
    with pytest.raises(ValueError):
        eb.pixel_level_counts(np.zeros((3, 3), bool), gt)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_pixel_counts_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    gt = _labels(rng, (17, 23))
    m = rng.random(gt.shape) < 0.5
    tp = fp = fn = 0
    for y in range(gt.shape[0]):
        for x in range(gt.shape[1]):
            if gt[y, x] == BOUNDARY:
                continue
            if m[y, x] and gt[y, x] == COPIED:
                tp += 1
            elif m[y, x]:
                fp += 1
            elif gt[y, x] == COPIED:
                fn += 1
    c = eb.pixel_level_counts(m, gt)
    assert c == ConfusionCounts(tp, fp, fn)
    assert c.tp + c.fn == int((gt == COPIED).sum())


def test_image_counts_rule():
    assert eb.image_counts(False, True) == ConfusionCounts(0, 1, 0)
    assert eb.image_counts(True, True) == ConfusionCounts(1, 0, 0)
    assert eb.image_counts(True, False) == ConfusionCounts(0, 0, 1)
    assert eb.image_counts(False, False) == ConfusionCounts()


# ---------------------------------------------------------------- calibration

def test_calibrate_tie_break():
    samples = [CalibrationSample(True, {t: t <= 300 for t in eb.TAU2_GRID}),
               CalibrationSample(False, {t: False for t in eb.TAU2_GRID})]
    assert eb.calibrate_tau2(samples) == 300
    assert eb.calibrate_tau2(samples, keypoint=True) == 4


def test_calibrate_undefined():
    samples = [CalibrationSample(False, {t: False for t in eb.TAU2_GRID})]
    with pytest.raises(ValueError):
        eb.calibrate_tau2(samples)


def _grid_oracle(samples):
    best = None
    for t in eb.TAU2_GRID:
        tp = sum(s.tampered and s.decisions[t] for s in samples)
        fp = sum((not s.tampered) and s.decisions[t] for s in samples)
        fn = sum(s.tampered and not s.decisions[t] for s in samples)
        if tp == 0:
            continue  # p or r is 0 or undefined; f1 undefined or zero
        f1 = 2 * tp / (2 * tp + fp + fn)
        if best is None or f1 >= best[0]:
            best = (f1, t)
    return best


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_calibrate_vs_grid_oracle(seed):
    rng = np.random.default_rng(seed)
    samples = []
    for method_bias in (200, 700):  # two detectors with different noise floors
        for k in range(8):
            tampered = k < 5
            strength = rng.integers(100, 1200) if tampered else rng.integers(0, method_bias)
            samples.append(CalibrationSample(tampered, {t: t <= strength for t in eb.TAU2_GRID}))
    oracle = _grid_oracle(samples)
    if oracle is None:
        with pytest.raises(ValueError):
            eb.calibrate_tau2(samples)
    else:
        got = eb.calibrate_tau2(samples)
        assert got == oracle[1] and got in eb.TAU2_GRID
        assert eb.calibrate_tau2(list(samples)) == got


# ---------------------------------------------------------------- aggregation

def _record(rng, method, param, k):
    tampered = bool(rng.random() < 0.7)
    pixel = ConfusionCounts(*map(int, rng.integers(0, 500, 3))) if tampered else None
    return RunRecord(f"case-{k:03d}", f"v-{param}", "noise", param, method, tampered,
                     bool(rng.random() < 0.6), {"tau2": 50}, pixel)


def test_aggregate_single_and_pooled():
    r1 = RunRecord("c0", "plain", "plain", "", "dct", True, True, {}, ConfusionCounts(10, 5, 0))
    rows = eb.aggregate([r1], "pixel")
    assert len(rows) == 1 and rows[0].metrics == eb.metrics(ConfusionCounts(10, 5, 0))
    r2 = RunRecord("c1", "plain", "plain", "", "dct", True, True, {}, ConfusionCounts(0, 0, 10))
    rows = eb.aggregate([r1, r2], "pixel")
    assert rows[0].metrics == eb.metrics(ConfusionCounts(10, 5, 10)) and rows[0].n_cases == 2
    macro = eb.aggregate([r1, r2], "pixel", macro=True)[0].metrics
    assert macro.precision == pytest.approx(2 / 3)  # the second record has undefined precision
    with pytest.raises(ValueError):
        eb.aggregate([r1], "region")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["image", "pixel"]))
def test_aggregate_vs_group_sum(seed, level):
    rng = np.random.default_rng(seed)
    recs = [_record(rng, m, p, k) for k in range(30)
            for m, p in [(rng.choice(["dct", "pca"]), str(rng.choice(["0.02", "0.04", "0.1"])))]]
    groups = {}
    for r in recs:
        if level == "pixel" and not r.tampered:
            continue
        c = r.pixel if level == "pixel" else r.image
        g = groups.setdefault((r.method, r.param), [0, 0, 0, 0])
        g[0] += c.tp
        g[1] += c.fp
        g[2] += c.fn
        g[3] += 1
    rows = eb.aggregate(recs, level)
    assert {(r.method, r.param) for r in rows} == set(groups)
    for row in rows:
        tp, fp, fn, n = groups[(row.method, row.param)]
        assert row.n_cases == n
        assert row.metrics == eb.metrics(ConfusionCounts(tp, fp, fn))


def test_aggregate_sorted_numeric_params():
    rng = np.random.default_rng(0)
    recs = [_record(rng, "dct", p, k) for k, p in enumerate(["0.1", "0.02", "0.04"])]
    assert [r.param for r in eb.aggregate(recs, "image")] == ["0.02", "0.04", "0.1"]


def test_macro_equals_micro_for_identical_counts():
    c = ConfusionCounts(7, 2, 3)
    recs = [RunRecord(f"c{k}", "plain", "plain", "", "dct", True, True, {}, c) for k in range(5)]
    micro = eb.aggregate(recs, "pixel")[0].metrics
    macro = eb.aggregate(recs, "pixel", macro=True)[0].metrics
    for a, b in zip((micro.precision, micro.recall, micro.f1), (macro.precision, macro.recall, macro.f1)):
        assert a == pytest.approx(b, abs=1e-12)


def test_errors_skipped_and_records_roundtrip():
    rng = np.random.default_rng(1)
    r = _record(rng, "dct", "0.02", 0)
    r.wall_time = 1.5
    back = RunRecord.from_json(r.to_json())
    assert back.wall_time is None and back.pixel == r.pixel and back.detected == r.detected
    bad = RunRecord("c9", "plain", "plain", "", "dct", True, False, {}, None, error="boom")
    assert eb.aggregate([bad], "pixel") == []


def test_report_csv():
    r1 = RunRecord("c0", "plain", "plain", "", "dct", False, False, {})
    text = eb.report_csv(eb.aggregate([r1], "image"))
    assert text.splitlines() == ["method,param,precision,recall,f1,n_cases", "dct,,n/a,n/a,n/a,1"]
