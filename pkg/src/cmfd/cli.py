"""Command-line entry points: tamper, detect, evaluate, calibrate, report.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or undecodable inputs, failed runs), 3 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import corpus, evalbench, imgio, pipeline, tamper
from .pipeline import ConfigError, PipelineConfig, PipelineError

log = logging.getLogger("cmfd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
OVERLAY_COLOR = (1.0, 0.0, 0.0)
OVERLAY_ALPHA = 0.5
CALIBRATION_AXES = ("plain", "jpeg")
# JPEG qualities used for calibration (the high-quality end of the grid)
CALIBRATION_MIN_QUALITY = 70
_CONFIG_FIELDS = {f.name for f in dataclasses.fields(PipelineConfig)}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config

def load_yaml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be a mapping")
    return data


def pipeline_config(file_cfg: dict, args) -> PipelineConfig:
    """Config file values overridden by explicit command-line flags."""
    unknown = set(file_cfg) - _CONFIG_FIELDS
    if unknown:
        raise UsageError(f"unknown pipeline config keys: {', '.join(sorted(unknown))}")
    values = dict(file_cfg)
    for name in _CONFIG_FIELDS:
        v = getattr(args, name, None)
        if v is not None and v is not False:
            values[name] = v
    tau2 = values.get("tau2")
    if isinstance(tau2, str) and tau2 != "auto":
        try:
            values["tau2"] = int(tau2)
        except ValueError:
            raise UsageError(f"tau2 must be an integer or 'auto', got {tau2!r}") from None
    return PipelineConfig(**values)


def _add_pipeline_args(p: argparse.ArgumentParser, method: bool = True):
    if method:
        p.add_argument("--method", choices=pipeline.METHODS)
    p.add_argument("--config", help="YAML file with pipeline settings")
    p.add_argument("--block-size", dest="block_size", type=int)
    p.add_argument("--tau1", type=float, help="minimum shift length in pixels")
    p.add_argument("--tau2", help="minimum same-transform pairs, or 'auto'")
    p.add_argument("--tau3", type=int, help="minimum detected region area in pixels")
    p.add_argument("--matcher", choices=("1nn", "g2nn"))
    p.add_argument("--ratio", type=float, help="g2NN ratio")
    p.add_argument("--checks", type=int, help="kd-forest leaf checks per query")
    p.add_argument("--exact", action="store_true", help="brute-force nearest neighbours")
    p.add_argument("--seed", type=int)
    p.add_argument("--cache-dir", dest="cache_dir",
                   help=f"feature cache directory (default: ${pipeline.CACHE_ENV})")


# ---------------------------------------------------------------- outputs

def overlay(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    rgb = img if img.ndim == 3 else imgio.gray_to_rgb(img)
    a = OVERLAY_ALPHA * np.asarray(mask, np.float64)[..., None]
    return rgb * (1.0 - a) + a * np.asarray(OVERLAY_COLOR)


def write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    imgio.atomic_write_bytes(path, text.encode())


def write_detection(out: Path, img: np.ndarray, det: pipeline.Detection) -> None:
    imgio.write_png_u8(out / "map.png", np.where(det.mask, 255, 0).astype(np.uint8))
    imgio.write_png(out / "overlay.png", overlay(img, det.mask))
    write_json(out / "summary.json", det.summary())


# ---------------------------------------------------------------- commands

def cmd_tamper(args) -> int:
    cfg = load_yaml(args.config)
    out = args.output or cfg.get("output")
    if not out:
        raise UsageError("no output directory: pass --output or set 'output' in the config")
    try:
        cfg = corpus.validate_config(cfg)
    except corpus.CorpusError as exc:
        raise UsageError(str(exc)) from exc
    for b in cfg["bases"]:
        if not Path(b).exists():
            raise DataError(f"base image not found: {b}")
    written = corpus.build_corpus(cfg, out, args.jobs)
    print(f"wrote {len(written)} variants to {out}")
    return EXIT_OK


def cmd_detect(args) -> int:
    cfg = pipeline_config(load_yaml(args.config) if args.config else {}, args)
    path = Path(args.image)
    if not path.exists():
        raise DataError(f"image not found: {path}")
    img = imgio.read_image(path)
    if cfg.tau2 == "auto":
        raise UsageError("tau2 = auto needs a corpus; use 'calibrate' and pass the result")
    det = pipeline.detect(img, cfg)
    out = Path(args.output)
    write_detection(out, img, det)
    s = det.summary()
    print(f"{path}: {'tampered' if s['tampered'] else 'clean'}, {s['region_count']} region(s)")
    return EXIT_OK


def _calibration_items(items):
    out = []
    for it in items:
        if it.axis == "plain" or (it.axis == "jpeg" and int(it.param) >= CALIBRATION_MIN_QUALITY):
            out.append(it)
    return out


def _decisions_task(item: corpus.CorpusItem, cfg: PipelineConfig):
    return evalbench.CalibrationSample(item.tampered, pipeline.decisions_by_tau2(item.image(), cfg))


def _pool_map(fn, tasks, jobs):
    """Ordered map over argument tuples; processes when jobs > 1."""
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as ex:
            return list(ex.map(fn, *zip(*tasks)))
    return [fn(*t) for t in tasks]


def calibrate(items, cfg: PipelineConfig, jobs: int = 1) -> tuple[int, dict]:
    """(tau2, {tau2: metrics}) over the plain and high-quality JPEG items."""
    if cfg.keypoint:
        return evalbench.KEYPOINT_TAU2, {}
    cal = _calibration_items(items)
    if not any(it.tampered for it in cal) or all(it.tampered for it in cal):
        raise DataError("calibration needs tampered and untampered plain/JPEG images")
    samples = _pool_map(_decisions_task, [(it, cfg) for it in cal], jobs)
    table = {}
    for tau2 in evalbench.TAU2_GRID:
        total = evalbench.ConfusionCounts()
        for s in samples:
            total = total + evalbench.image_counts(s.tampered, s.decisions[tau2])
        table[tau2] = evalbench.metrics(total)
    try:
        best = evalbench.calibrate_tau2(samples)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    return best, table


def cmd_calibrate(args) -> int:
    cfg = pipeline_config(load_yaml(args.config) if args.config else {}, args)
    cfg = dataclasses.replace(cfg, tau2=None, tau3=None).resolved()
    items = corpus.read_corpus(args.corpus)
    best, table = calibrate(items, cfg, args.jobs)
    result = {"method": cfg.method, "tau2": best,
              "grid": {str(k): dataclasses.asdict(m) for k, m in table.items()}}
    if args.output:
        write_json(args.output, result)
    print(f"{cfg.method}: tau2 = {best}")
    return EXIT_OK


def run_item(item: corpus.CorpusItem, cfg: PipelineConfig) -> evalbench.RunRecord:
    """Detect on one corpus image; failures become error records."""
    rec = evalbench.RunRecord(item.case_id, item.variant, item.axis, item.param, cfg.method,
                              item.tampered, False, cfg.thresholds())
    t0 = time.perf_counter()
    try:
        det = pipeline.detect(item.image(), cfg)
        rec.detected = bool(det.tampered)
        if item.tampered:
            rec.pixel = evalbench.pixel_level_counts(det.mask, item.labels())
    except (PipelineError, imgio.ImageError, imgio.JpegError, FileNotFoundError, ValueError) as exc:
        rec.error = f"{type(exc).__name__}: {exc}"
    rec.wall_time = time.perf_counter() - t0
    return rec


def write_reports(records, out: Path, levels) -> list[Path]:
    written = []
    for axis in sorted({r.axis for r in records}):
        sub = [r for r in records if r.axis == axis]
        for level in levels:
            rows = evalbench.aggregate(sub, level)
            if not rows:
                continue
            p = out / f"{axis}-{level}.csv"
            imgio.atomic_write_bytes(p, evalbench.report_csv(rows).encode())
            written.append(p)
    return written


def cmd_evaluate(args) -> int:
    file_cfg = load_yaml(args.config) if args.config else {}
    methods = args.methods.split(",") if args.methods else [file_cfg.get("method", "zernike")]
    base = pipeline_config({k: v for k, v in file_cfg.items() if k != "method"}, args)
    items = corpus.read_corpus(args.corpus)
    if args.axes:
        axes = set(args.axes.split(","))
        items = [it for it in items if it.axis in axes]
    levels = ("image", "pixel") if args.level == "both" else (args.level,)
    out = Path(args.output)
    records = []
    for m in methods:
        cfg = dataclasses.replace(base, method=m)
        if cfg.tau2 == "auto":
            tau2, _ = calibrate(items, cfg.resolved(), args.jobs)
            log.info("%s: calibrated tau2 = %d", m, tau2)
            cfg = dataclasses.replace(cfg, tau2=tau2, tau3=None)
        cfg = cfg.resolved()
        recs = _pool_map(run_item, [(it, cfg) for it in items], args.jobs)
        for r in recs:
            log.info("%s %s/%s detected=%s%s", m, r.case, r.variant, r.detected,
                     f" error={r.error}" if r.error else "")
        records.extend(recs)
    records.sort(key=lambda r: (r.method, r.axis, r.case, r.variant))
    text = "".join(r.to_json() + "\n" for r in records)
    imgio.atomic_write_bytes(out / "records.jsonl", text.encode())
    reports = write_reports(records, out, levels)
    failed = [r for r in records if r.error is not None]
    print(f"{len(records)} runs, {len(failed)} failed; {len(reports)} report(s) in {out}")
    for r in failed:
        print(f"  FAILED {r.method} {r.case}/{r.variant}: {r.error}")
    return EXIT_DATA if failed else EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.records)
    if not path.exists():
        raise DataError(f"records file not found: {path}")
    records = evalbench.read_records(path)
    if args.axis:
        records = [r for r in records if r.axis == args.axis]
    if args.method:
        records = [r for r in records if r.method == args.method]
    text = evalbench.report_csv(evalbench.aggregate(records, args.level, macro=args.macro))
    if args.output:
        imgio.atomic_write_bytes(args.output, text.encode())
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cmfd", description="Copy-move forgery detection toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("tamper", help="synthesize a forgery corpus")
    p.add_argument("config", help="YAML corpus config")
    p.add_argument("--output", help="corpus directory (overrides 'output' in the config)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=cmd_tamper)

    p = sub.add_parser("detect", help="run the detector on one image")
    p.add_argument("image")
    p.add_argument("--output", required=True, help="directory for map, overlay and summary")
    _add_pipeline_args(p)
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("evaluate", help="run methods over a corpus and write reports")
    p.add_argument("corpus")
    p.add_argument("--methods", help="comma-separated method ids")
    p.add_argument("--level", choices=("image", "pixel", "both"), default="both")
    p.add_argument("--axes", help="comma-separated axes to keep")
    p.add_argument("--output", required=True)
    p.add_argument("--jobs", type=int, default=1)
    _add_pipeline_args(p, method=False)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("calibrate", help="pick tau2 on plain and JPEG corpus images")
    p.add_argument("corpus")
    p.add_argument("--output", help="JSON file with the per-tau2 metrics")
    p.add_argument("--jobs", type=int, default=1)
    _add_pipeline_args(p)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("report", help="aggregate a records.jsonl log into CSV")
    p.add_argument("records")
    p.add_argument("--level", choices=("image", "pixel"), default="pixel")
    p.add_argument("--axis")
    p.add_argument("--method")
    p.add_argument("--macro", action="store_true", help="average per-case metrics")
    p.add_argument("--output")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors exit 1, --help exits 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("cmfd: error: --jobs must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except (UsageError, ConfigError, corpus.CorpusError) as exc:
        print(f"cmfd: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, PipelineError, imgio.ImageError, imgio.JpegError, tamper.TamperError,
            FileNotFoundError) as exc:
        print(f"cmfd: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"cmfd: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
