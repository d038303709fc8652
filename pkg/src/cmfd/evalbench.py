"""Image- and pixel-level error measures, tau2 calibration and report tables.

Undefined ratios (0/0) are represented by ``None`` and printed as ``n/a``.
Counts within a report cell are pooled before computing metrics
(micro-averaging); ``macro=True`` averages per-record metrics instead.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .tamper import BOUNDARY, COPIED

TAU2_GRID = tuple(range(50, 1001, 50))
KEYPOINT_TAU2 = 4
EIGHT = np.ones((3, 3), bool)
CSV_COLUMNS = ("method", "param", "precision", "recall", "f1", "n_cases")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError(f"negative confusion count {self}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class Metrics:
    precision: float | None
    recall: float | None
    f1: float | None


def _ratio(a, b):
    return None if b == 0 else a / b


def f1_score(p: float | None, r: float | None) -> float | None:
    if p is None or r is None or p + r == 0:
        return None
    return 2.0 * p * r / (p + r)


def metrics(c: ConfusionCounts) -> Metrics:
    p = _ratio(c.tp, c.tp + c.fp)
    r = _ratio(c.tp, c.tp + c.fn)
    return Metrics(p, r, f1_score(p, r))


def fmt_metric(v: float | None, digits: int = 4) -> str:
    return "n/a" if v is None else f"{v:.{digits}f}"


def largest_component(mask: np.ndarray) -> int:
    lab, n = ndimage.label(np.asarray(mask, bool), structure=EIGHT)
    if n == 0:
        return 0
    return int(np.bincount(lab.ravel())[1:].max())


def image_level_decision(mask: np.ndarray, tau3: int) -> bool:
    """True iff some 8-connected detected region has more than tau3 pixels."""
    return largest_component(mask) > tau3


def pixel_level_counts(mask: np.ndarray, labels: np.ndarray) -> ConfusionCounts:
    """Counts over non-boundary pixels; ``labels`` uses tamper's class ids."""
    mask = np.asarray(mask, bool)
    labels = np.asarray(labels)
    if mask.shape != labels.shape:
        raise ValueError(f"map {mask.shape} and ground truth {labels.shape} differ in size")
    scored = labels != BOUNDARY
    copied = labels == COPIED
    tp = int(np.count_nonzero(mask & copied))
    fp = int(np.count_nonzero(mask & scored & ~copied))
    fn = int(np.count_nonzero(~mask & copied))
    return ConfusionCounts(tp, fp, fn)


def image_counts(truth: bool, detected: bool) -> ConfusionCounts:
    """A flagged original is a false positive; a flagged forgery counts as a
    hit whatever region raised the alarm."""
    return ConfusionCounts(int(truth and detected), int(detected and not truth),
                           int(truth and not detected))


# ---------------------------------------------------------------- calibration

@dataclass
class CalibrationSample:
    """One image: its truth and the image-level decision for every tau2."""

    tampered: bool
    decisions: dict[int, bool]


def calibrate_tau2(samples: Sequence[CalibrationSample], grid: Iterable[int] = TAU2_GRID,
                   keypoint: bool = False) -> int:
    """tau2 maximizing image-level F1; ties go to the larger tau2."""
    if keypoint:
        return KEYPOINT_TAU2
    best, best_f1 = None, None
    for tau2 in sorted(grid):
        total = ConfusionCounts()
        for s in samples:
            total = total + image_counts(s.tampered, s.decisions[tau2])
        f1 = metrics(total).f1
        if f1 is None:
            continue
        if best_f1 is None or f1 >= best_f1:
            best, best_f1 = tau2, f1
    if best is None:
        raise ValueError("F1 is undefined for every tau2 in the grid")
    return best


# ---------------------------------------------------------------- records

@dataclass
class RunRecord:
    case: str
    variant: str
    axis: str
    param: str
    method: str
    tampered: bool
    detected: bool
    thresholds: dict = field(default_factory=dict)
    pixel: ConfusionCounts | None = None  # only for tampered images
    error: str | None = None
    wall_time: float | None = None  # kept out of the byte-stable log

    @property
    def image(self) -> ConfusionCounts:
        return image_counts(self.tampered, self.detected)

    def to_json(self, timing: bool = False) -> str:
        d = asdict(self)
        d["pixel"] = None if self.pixel is None else asdict(self.pixel)
        if not timing:
            d.pop("wall_time")
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        d = json.loads(text)
        if d.get("pixel") is not None:
            d["pixel"] = ConfusionCounts(**d["pixel"])
        return cls(**d)


def read_records(path) -> list[RunRecord]:
    with open(path) as fh:
        return [RunRecord.from_json(line) for line in fh if line.strip()]


def _param_key(p: str):
    try:
        return (0, float(p), p)
    except ValueError:
        return (1, 0.0, p)


@dataclass
class ReportRow:
    method: str
    param: str
    metrics: Metrics
    n_cases: int


def aggregate(records: Sequence[RunRecord], level: str, macro: bool = False) -> list[ReportRow]:
    """One row per (method, param); counts pooled unless ``macro``."""
    if level not in ("image", "pixel"):
        raise ValueError(f"unknown evaluation level {level!r}")
    cells: dict[tuple[str, str], list[ConfusionCounts]] = {}
    for r in records:
        if r.error is not None:
            continue
        if level == "pixel":
            if not r.tampered:
                continue
            if r.pixel is None:
                raise ValueError(f"record {r.case}/{r.variant} has no pixel-level counts")
            c = r.pixel
        else:
            c = r.image
        cells.setdefault((r.method, r.param), []).append(c)
    rows = []
    for (method, param) in sorted(cells, key=lambda k: (k[0], _param_key(k[1]))):
        counts = cells[(method, param)]
        if macro:
            ms = [metrics(c) for c in counts]

            def mean(vals):
                vals = [v for v in vals if v is not None]
                return float(np.mean(vals)) if vals else None

            m = Metrics(mean([x.precision for x in ms]), mean([x.recall for x in ms]),
                        mean([x.f1 for x in ms]))
        else:
            total = ConfusionCounts()
            for c in counts:
                total = total + c
            m = metrics(total)
        rows.append(ReportRow(method, param, m, len(counts)))
    return rows


def report_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.method, r.param, fmt_metric(r.metrics.precision),
                    fmt_metric(r.metrics.recall), fmt_metric(r.metrics.f1), r.n_cases])
    return buf.getvalue()
