"""Benchmark corpora: sweep configs, on-disk layout, reading back.

Layout::

    <root>/<case>/<variant>/image.png | image.jpg
                           /gt.png
                           /meta.json

Variant names are ``plain``, ``jpeg-70``, ``noise-0.02``, ``rot-10``,
``scale-1.05``, ``combined-3``, ``down-0.9`` and ``multi-5``. Untampered
counterparts (needed for image-level false positives) use the suffix
``-orig``; they exist for the axes whose global post-processing changes
the untampered image (plain, jpeg, combined, down).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import imgio, synth, tamper
from .tamper import ForgeryCase, PasteOp, Snippet

# combined setups: (rotation deg, scale, JPEG quality)
COMBINED = {1: (2.0, 1.01, 80), 2: (4.0, 1.03, 75), 3: (6.0, 1.05, 70), 4: (8.0, 1.07, 65),
            5: (20.0, 1.20, 60), 6: (60.0, 1.40, 50)}

GRIDS = {
    "jpeg": list(range(100, 19, -10)),
    "noise": [0.02, 0.04, 0.06, 0.08, 0.10],
    "scale": [round(0.91 + 0.02 * k, 2) for k in range(10)] + [0.5, 0.8, 1.2, 2.0],
    "rotation": [2, 4, 6, 8, 10, 20, 60, 180],
    "combined": [1, 2, 3, 4, 5, 6],
    "downsample": [round(0.9 - 0.1 * k, 1) for k in range(8)],
}
AXES = ("plain",) + tuple(GRIDS) + ("multi",)
ORIGINAL_AXES = ("plain", "jpeg", "combined", "downsample")
_PREFIX = {"plain": "plain", "jpeg": "jpeg", "noise": "noise", "scale": "scale",
           "rotation": "rot", "combined": "combined", "downsample": "down", "multi": "multi"}

DEFAULTS = {
    "seed": 0,
    "cases": 20,
    "size": [512, 512],
    "snippet_size": 96,
    "min_shift": 64,
    "categories": list(synth.CATEGORIES),
    "bases": [],
    "originals": True,
    "variants": {"plain": True},
}
_VARIANT_KEYS = set(AXES)
_MULTI_KEYS = {"copies", "block", "min_dist"}


class CorpusError(ValueError):
    pass


def fmt_param(value) -> str:
    if isinstance(value, float):
        return f"{value:g}"
    return str(value)


def variant_name(axis: str, param=None) -> str:
    if axis == "plain":
        return "plain"
    return f"{_PREFIX[axis]}-{fmt_param(param)}"


def validate_config(cfg: dict) -> dict:
    """Fill defaults; unknown keys anywhere are errors."""
    if not isinstance(cfg, dict):
        raise CorpusError("corpus config must be a mapping")
    unknown = set(cfg) - set(DEFAULTS) - {"output"}
    if unknown:
        raise CorpusError(f"unknown corpus config keys: {', '.join(sorted(unknown))}")
    out = {**DEFAULTS, **cfg}
    variants = out["variants"]
    if not isinstance(variants, dict):
        raise CorpusError("variants must be a mapping of axis to grid")
    bad = set(variants) - _VARIANT_KEYS
    if bad:
        raise CorpusError(f"unknown variant axes: {', '.join(sorted(bad))}")
    clean = {}
    for axis, grid in variants.items():
        if axis == "plain":
            if grid:
                clean["plain"] = True
            continue
        if axis == "multi":
            if grid in (None, False):
                continue
            grid = {} if grid is True else dict(grid)
            bad = set(grid) - _MULTI_KEYS
            if bad:
                raise CorpusError(f"unknown multi keys: {', '.join(sorted(bad))}")
            clean["multi"] = {"copies": int(grid.get("copies", 5)), "block": int(grid.get("block", 64)),
                              "min_dist": float(grid.get("min_dist", 50.0))}
            continue
        if grid is True:
            grid = GRIDS[axis]
        if not grid:
            continue
        grid = list(grid)
        if axis == "jpeg" and not all(1 <= int(q) <= 100 for q in grid):
            raise CorpusError("JPEG qualities must lie in 1..100")
        if axis == "combined" and not all(int(k) in COMBINED for k in grid):
            raise CorpusError(f"combined setups are {sorted(COMBINED)}")
        if axis in ("scale", "downsample") and not all(float(v) > 0 for v in grid):
            raise CorpusError(f"{axis} factors must be positive")
        if axis == "noise" and not all(float(v) >= 0 for v in grid):
            raise CorpusError("noise sigmas must be non-negative")
        clean[axis] = grid
    out["variants"] = clean
    h, w = (int(v) for v in out["size"])
    s = int(out["snippet_size"])
    if s < 8 or 2 * s + 2 > max(h, w):
        raise CorpusError(f"snippet size {s} does not fit twice into {h}x{w}")
    for c in out["categories"]:
        if c not in synth.CATEGORIES:
            raise CorpusError(f"unknown snippet category {c!r}")
    return out


@dataclass
class CaseSetup:
    case_id: str
    base: np.ndarray
    base_info: dict
    snippet: Snippet
    target: tuple[int, int]
    seed: int


def _case_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1)[0])


def load_base(info: dict) -> np.ndarray:
    if info["kind"] == "synthetic":
        h, w = info["size"]
        return synth.base_image(int(info["seed"]), h, w)[0]
    path = Path(info["path"])
    if not path.exists():
        raise FileNotFoundError(f"base image not found: {path}")
    return imgio.read_image(path)


def setup_case(cfg: dict, k: int) -> CaseSetup:
    seed = _case_seed(cfg["seed"], k)
    rng = np.random.default_rng(seed)
    h, w = (int(v) for v in cfg["size"])
    size = int(cfg["snippet_size"])
    category = cfg["categories"][k % len(cfg["categories"])]
    if cfg["bases"]:
        path = str(cfg["bases"][k % len(cfg["bases"])])
        info = {"kind": "file", "path": path}
        base = load_base(info)
        bh, bw = base.shape[:2]
        anchor = (int(rng.integers(0, bw - size + 1)), int(rng.integers(0, bh - size + 1)))
        category = None
    else:
        info = {"kind": "synthetic", "seed": seed, "size": [h, w]}
        base, zones = synth.base_image(seed, h, w)
        anchor = synth.find_anchor(rng, zones, category, size)
    alpha = synth.blob_alpha(rng, size)
    snip = Snippet(alpha, anchor, category)
    target = tamper.random_target(rng, base.shape[:2], alpha.shape, anchor, float(cfg["min_shift"]))
    return CaseSetup(f"case-{k:03d}", base, info, snip, target, seed)


def _variant_cases(setup: CaseSetup, cfg: dict) -> list[tuple[str, str, str, ForgeryCase, bool]]:
    """(variant name, axis, param, case, tampered) for every requested variant."""
    out = []
    snips = {"s0": setup.snippet}
    bid = f"{setup.case_id}-base"

    def add(axis, param, pastes, post, tampered=True):
        name = variant_name(axis, param)
        if not tampered:
            name += "-orig"
        p = "none" if axis == "plain" else fmt_param(param)
        out.append((name, axis, p, ForgeryCase(bid, snips if tampered else {}, pastes if tampered else [],
                                               post, setup.seed), tampered))

    def paste(**kw):
        return [PasteOp("s0", setup.target, **kw)]

    v = cfg["variants"]
    orig = cfg["originals"]
    if "plain" in v:
        add("plain", None, paste(), {})
        if orig:
            add("plain", None, [], {}, False)
    for q in v.get("jpeg", []):
        add("jpeg", int(q), paste(), {"jpeg_quality": int(q)})
        if orig:
            add("jpeg", int(q), [], {"jpeg_quality": int(q)}, False)
    for s in v.get("noise", []):
        add("noise", float(s), paste(noise_sigma=float(s)), {})
    for r in v.get("rotation", []):
        add("rotation", r, paste(rotation=float(r)), {})
    for s in v.get("scale", []):
        add("scale", float(s), paste(scale=float(s)), {})
    for c in v.get("combined", []):
        rot, sc, q = COMBINED[int(c)]
        add("combined", int(c), paste(rotation=rot, scale=sc), {"jpeg_quality": q})
        if orig:
            add("combined", int(c), [], {"jpeg_quality": q}, False)
    for f in v.get("downsample", []):
        add("downsample", float(f), paste(), {"downsample_factor": float(f)})
        if orig:
            add("downsample", float(f), [], {"downsample_factor": float(f)}, False)
    if "multi" in v:
        m = v["multi"]
        mc = tamper.multi_paste_case(setup.base, m["block"], m["copies"], setup.seed, m["min_dist"], bid)
        out.append((variant_name("multi", m["copies"]), "multi", fmt_param(m["copies"]), mc, True))
    return out


def render_variant(base: np.ndarray, case: ForgeryCase):
    """(image, labels, jpeg bytes or None); untampered cases skip splicing."""
    if not case.pastes:
        labels = np.zeros(base.shape[:2], np.int8)
        return tamper.apply_global_post(base, labels, case.global_post)
    return tamper.render_case(base, case)


def write_case(root: Path, cfg: dict, k: int) -> list[Path]:
    setup = setup_case(cfg, k)
    written = []
    for name, axis, param, case, tampered in _variant_cases(setup, cfg):
        d = root / setup.case_id / name
        img, labels, data = render_variant(setup.base, case)
        if data is not None:
            imgio.atomic_write_bytes(d / "image.jpg", data)
        else:
            imgio.write_png(d / "image.png", img)
        imgio.write_png_u8(d / "gt.png", tamper.encode_gt(labels))
        meta = {"case_id": setup.case_id, "variant": name, "axis": axis, "param": param,
                "tampered": tampered, "base": setup.base_info}
        imgio.atomic_write_bytes(d / "meta.json",
                                 (tamper.case_to_json_text(case, meta) + "\n").encode())
        written.append(d)
    return written


def build_corpus(cfg: dict, root, jobs: int = 1) -> list[Path]:
    cfg = validate_config(cfg)
    root = Path(root)
    ks = range(int(cfg["cases"]))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as ex:
            parts = list(ex.map(write_case, [root] * len(ks), [cfg] * len(ks), ks))
    else:
        parts = [write_case(root, cfg, k) for k in ks]
    return [p for part in parts for p in part]


# ---------------------------------------------------------------- reading

@dataclass
class CorpusItem:
    path: Path
    case_id: str
    variant: str
    axis: str
    param: str
    tampered: bool
    meta: dict

    @property
    def image_path(self) -> Path:
        for name in ("image.png", "image.jpg"):
            if (self.path / name).exists():
                return self.path / name
        raise FileNotFoundError(f"no image in {self.path}")

    def image(self) -> np.ndarray:
        return imgio.read_image(self.image_path)

    def labels(self) -> np.ndarray:
        gt = self.path / "gt.png"
        if not gt.exists():
            raise FileNotFoundError(f"ground truth missing: {gt}")
        return tamper.decode_gt(imgio.read_gray_u8(gt))


def read_corpus(root) -> list[CorpusItem]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {root}")
    items = []
    for meta_path in sorted(root.glob("*/*/meta.json")):
        meta = json.loads(meta_path.read_text())
        items.append(CorpusItem(meta_path.parent, meta["case_id"], meta["variant"], meta["axis"],
                                str(meta["param"]), bool(meta["tampered"]), meta))
    if not items:
        raise FileNotFoundError(f"no corpus entries under {root}")
    return items
