"""The detection pipeline: features, matching, shift filter, post-processing.

Steps for one image:

1. grayscale conversion (rgb kept for colour features)
2. block features over every overlapping block, or SIFT keypoints
3. nearest-neighbour matching (1NN or g2NN)
4. removal of pairs whose shift is shorter than tau1
5. SATS clustering (blocks) or clustering + RANSAC + correlation (keypoints)
6. the image is flagged when a detected region exceeds tau3 pixels
"""

from __future__ import annotations

import dataclasses
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blockfeat, keyfeat, postproc
from .evalbench import TAU2_GRID, image_level_decision
from .imgio import to_grayscale
from .matchfilt import build_index, filter_min_shift, match_features

KEYPOINT_METHODS = ("sift",)
METHODS = blockfeat.BLOCK_METHODS + KEYPOINT_METHODS

# per-method tau2 defaults (image-level calibration on JPEG-compressed originals)
TAU2_DEFAULTS = {"blur": 100, "luo": 300, "bravo": 200, "circle": 200, "dct": 1000,
                 "dwt": 1000, "fmt": 200, "hu": 50, "kpca": 1000, "lin": 400, "pca": 1000,
                 "svd": 50, "zernike": 800, "sift": 4}
KEYPOINT_TAU3 = 1000
CACHE_ENV = "CMFD_CACHE_DIR"


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    method: str = "zernike"
    block_size: int | None = None
    tau1: float = 50.0
    tau2: int | str | None = None  # None: method default; "auto": calibrate first
    tau3: int | None = None  # None: tau2 for blocks, 1000 for keypoints
    matcher: str | None = None  # None: 1nn for blocks, g2nn for keypoints
    ratio: float = 0.5
    k_max: int = 10
    trees: int = 4
    checks: int = 16  # per-query leaf checks; detection quality is flat from 16 up
    autotune: bool = False
    exact: bool = False
    seed: int = 0
    kpca_m: int = blockfeat.KPCA_ANCHORS
    kpca_sigma: float = blockfeat.KPCA_SIGMA
    kpca_scale: float = blockfeat.KPCA_SCALE
    pca_variance: float = blockfeat.PCA_VARIANCE
    sats_tol: float = postproc.SATS_TOL
    center_only: bool = False
    cache_dir: str | None = None

    @property
    def keypoint(self) -> bool:
        return self.method in KEYPOINT_METHODS

    def resolved(self) -> "PipelineConfig":
        """Copy with method-dependent defaults filled in and checked."""
        c = dataclasses.replace(self)
        if c.method not in METHODS:
            raise ConfigError(f"unknown method {c.method!r}; choose from {', '.join(METHODS)}")
        if c.matcher is None:
            c.matcher = "g2nn" if c.keypoint else "1nn"
        if c.matcher not in ("1nn", "g2nn"):
            raise ConfigError(f"unknown matcher {c.matcher!r}")
        if c.keypoint:
            if c.block_size is not None:
                raise ConfigError("block_size does not apply to keypoint methods")
            if c.tau2 is None:
                c.tau2 = TAU2_DEFAULTS[c.method]
            if c.tau2 != TAU2_DEFAULTS[c.method] and c.tau2 != "auto":
                raise ConfigError(f"{c.method} uses tau2 = {TAU2_DEFAULTS[c.method]} correspondences")
            c.tau2 = TAU2_DEFAULTS[c.method]
            if c.tau3 is None:
                c.tau3 = KEYPOINT_TAU3
            if c.tau3 != KEYPOINT_TAU3:
                raise ConfigError(f"{c.method} uses tau3 = {KEYPOINT_TAU3} pixels")
        else:
            if c.block_size is None:
                c.block_size = blockfeat.DEFAULT_BLOCK_SIZE[c.method]
            b = c.block_size
            if b < 2:
                raise ConfigError(f"block size must be at least 2, got {b}")
            if c.method == "circle" and b % 2 == 0:
                raise ConfigError(f"circle needs an odd block size, got {b}")
            if c.method == "dwt" and b & (b - 1):
                raise ConfigError(f"dwt needs a power-of-two block size, got {b}")
            if c.method == "lin" and b % 2:
                raise ConfigError(f"lin needs an even block size, got {b}")
            if c.tau2 is None:
                c.tau2 = TAU2_DEFAULTS[c.method]
            if c.tau2 != "auto":
                c.tau2 = int(c.tau2)
                if c.tau2 < 1:
                    raise ConfigError(f"tau2 must be positive, got {c.tau2}")
            if c.tau3 is None and c.tau2 != "auto":
                c.tau3 = int(c.tau2)
        if c.tau1 < 0:
            raise ConfigError(f"tau1 must be non-negative, got {c.tau1}")
        if not 0 < c.ratio <= 1:
            raise ConfigError(f"g2NN ratio must be in (0, 1], got {c.ratio}")
        if c.k_max < 2:
            raise ConfigError(f"k_max must be at least 2, got {c.k_max}")
        if c.trees < 1 or c.checks < 1:
            raise ConfigError("trees and checks must be positive")
        return c

    def thresholds(self) -> dict:
        return {"tau1": self.tau1, "tau2": self.tau2, "tau3": self.tau3}


@dataclass
class Detection:
    mask: np.ndarray
    tampered: bool
    clusters: list
    n_features: int
    n_matches: int
    config: PipelineConfig
    timings: dict = field(default_factory=dict)

    def summary(self) -> dict:
        lab_regions = postproc.DetectionResult(self.mask).regions()
        return {
            "method": self.config.method,
            "tampered": bool(self.tampered),
            "region_count": len(lab_regions),
            "regions": lab_regions,
            "transforms": [dict(c.transform.to_json(), pairs=int(c.h)) for c in self.clusters],
            "features": int(self.n_features),
            "matches": int(self.n_matches),
            "thresholds": self.config.thresholds(),
        }


def _stage(name):
    def wrap(fn):
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except PipelineError:
                raise
            except (ValueError, MemoryError, RuntimeError) as exc:
                raise PipelineError(name, str(exc)) from exc
        return inner
    return wrap


def _cache_path(cfg: PipelineConfig, digest: str) -> Path | None:
    root = cfg.cache_dir or os.environ.get(CACHE_ENV)
    if not root:
        return None
    key = f"{cfg.method}-b{cfg.block_size}-s{cfg.seed}-{digest}"
    if cfg.method == "kpca":
        key += f"-m{cfg.kpca_m}-g{cfg.kpca_sigma}-x{cfg.kpca_scale}"
    if cfg.method == "pca":
        key += f"-v{cfg.pca_variance}"
    return Path(root) / f"{key}.feat"


@_stage("features")
def compute_features(img: np.ndarray, cfg: PipelineConfig) -> blockfeat.FeatureMatrix:
    img = np.asarray(img, dtype=np.float64)
    if cfg.keypoint:
        return keyfeat.detect_and_describe(to_grayscale(img))
    path = _cache_path(cfg, blockfeat.image_digest(img))
    if path is not None:
        cached = blockfeat.load_features(path)
        if cached is not None and cached.method == cfg.method:
            return cached
    fm = blockfeat.extract(cfg.method, img, cfg.block_size, seed=cfg.seed,
                           pca_variance=cfg.pca_variance, kpca_m=cfg.kpca_m,
                           kpca_sigma=cfg.kpca_sigma, kpca_scale=cfg.kpca_scale)
    if path is not None:
        blockfeat.save_features(path, fm, blockfeat.image_digest(img))
    return fm


@_stage("matching")
def compute_matches(fm: blockfeat.FeatureMatrix, cfg: PipelineConfig):
    if len(fm) < 2:
        from .matchfilt import Matches
        return Matches.empty()
    index = build_index(fm, cfg.trees, cfg.checks, cfg.seed, cfg.exact,
                        target_recall=0.95 if cfg.autotune else None)
    matches = match_features(fm, index, cfg.matcher, cfg.ratio, cfg.k_max)
    return filter_min_shift(matches, cfg.tau1)


@_stage("postprocessing")
def cluster_matches(matches, fm, shape, cfg: PipelineConfig) -> list:
    if cfg.keypoint:
        return postproc.keypoint_clusters(matches, fm.coords, shape, seed=cfg.seed)
    # grow every cluster; thresholding by tau2 happens afterwards so that
    # calibration can replay any tau2 from one clustering
    return postproc.sats(matches, fm.coords, tau2=1, tol=cfg.sats_tol)


@_stage("postprocessing")
def clusters_to_mask(gray: np.ndarray, clusters: list, cfg: PipelineConfig, tau2=None,
                     tau3=None) -> tuple[np.ndarray, list]:
    tau2 = cfg.tau2 if tau2 is None else tau2
    tau3 = cfg.tau3 if tau3 is None else tau3
    if cfg.keypoint:
        return postproc.keypoint_map(gray, clusters), clusters
    kept = [c for c in clusters if c.h >= tau2]
    return postproc.blocks_to_map(kept, gray.shape, cfg.block_size, tau3, cfg.center_only), kept


def detect(img: np.ndarray, cfg: PipelineConfig) -> Detection:
    """Run the full pipeline on an rgb (or gray) image in [0, 1]."""
    cfg = cfg.resolved()
    if cfg.tau2 == "auto":
        raise ConfigError("tau2 = auto must be resolved by calibration before detection")
    img = np.asarray(img, dtype=np.float64)
    gray = to_grayscale(img)
    times = {}
    t0 = time.perf_counter()
    fm = compute_features(img, cfg)
    times["features"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    matches = compute_matches(fm, cfg)
    times["matching"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    clusters = cluster_matches(matches, fm, gray.shape, cfg)
    mask, kept = clusters_to_mask(gray, clusters, cfg)
    times["postprocessing"] = time.perf_counter() - t0
    tampered = image_level_decision(mask, cfg.tau3)
    return Detection(mask, tampered, kept, len(fm), len(matches), cfg, times)


def decisions_by_tau2(img: np.ndarray, cfg: PipelineConfig, grid=TAU2_GRID) -> dict[int, bool]:
    """Image-level decision for every tau2 of ``grid`` (tau3 = tau2)."""
    cfg = dataclasses.replace(cfg, tau2=min(grid), tau3=None).resolved()
    img = np.asarray(img, dtype=np.float64)
    gray = to_grayscale(img)
    fm = compute_features(img, cfg)
    clusters = cluster_matches(compute_matches(fm, cfg), fm, gray.shape, cfg)
    out = {}
    for tau2 in grid:
        mask, _ = clusters_to_mask(gray, clusters, cfg, tau2, tau2)
        out[tau2] = image_level_decision(mask, tau2)
    return out
