"""Procedural Moon-like and Mars-like scenes with exact ground-truth masks.

Class ids: 0 = terrain, 1 = rock, 2 = sky.  Moon scenes are high contrast
(near-black sky, bright rocks, cast shadows); Mars scenes have a bright sky,
rocks that overlap the terrain's intensity range, and a global haze blend
toward a mid grey that compresses contrast further.  Where a rock pokes
above the horizon the pixel is labelled rock, never sky.

Scenes are pure functions of their spec (see the package's rng module for
the exact generator), so a split archive regenerates byte-for-byte.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from .errors import GenerationError, ShapeError
from .pgm import read_pgm, write_pgm
from .rng import Stream, derive

TERRAIN, ROCK, SKY = 0, 1, 2

_SPLIT_CODE = {"train": 1, "val": 2, "test": 3}


@dataclass(frozen=True)
class SceneSpec:
    domain: str = "moon"                 # moon | mars
    size: tuple = (48, 48)
    rock_count_range: tuple = (2, 5)
    sky_fraction: float = 0.25
    seed: int = 0
    noise_std: float = 4.0
    haze: float = 0.3                    # mars only; moon ignores it

    def __post_init__(self):
        if self.domain not in ("moon", "mars"):
            raise ShapeError(f"domain must be moon or mars, got {self.domain!r}")
        if not (0.0 < self.sky_fraction < 0.5):
            raise ShapeError("sky_fraction must lie in (0, 0.5)")
        if self.rock_count_range[0] < 0 or self.rock_count_range[1] < self.rock_count_range[0]:
            raise ShapeError("bad rock_count_range")
        if not (0.0 <= self.haze < 1.0):
            raise ShapeError("haze must lie in [0, 1)")


@dataclass
class LabeledScene:
    image: np.ndarray    # (h, w) uint8
    mask: np.ndarray     # (h, w) uint8 in {0, 1, 2}
    meta: SceneSpec


def _ellipse_mask(h, w, cy, cx, ry, rx, theta):
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def generate(spec: SceneSpec) -> LabeledScene:
    h, w = spec.size
    rng = Stream(derive(spec.seed, 0x5CE9E))
    sky_rows = max(1, round(spec.sky_fraction * h))
    img = np.zeros((h, w), dtype=np.float64)
    mask = np.full((h, w), TERRAIN, dtype=np.uint8)

    if spec.domain == "moon":
        sky_lo, sky_hi = 0.0, 30.0
        grad_lo, grad_hi = 90.0, 160.0
        rock_lo, rock_hi = 170.0, 230.0
    else:
        sky_lo, sky_hi = 150.0, 200.0
        grad_lo, grad_hi = 100.0, 140.0
        rock_lo, rock_hi = 120.0, 160.0

    img[:sky_rows] = rng.uniform_array(sky_rows * w, sky_lo, sky_hi).reshape(sky_rows, w)
    mask[:sky_rows] = SKY

    rows = np.arange(sky_rows, h, dtype=np.float64)
    frac = (rows - sky_rows) / max(1, h - 1 - sky_rows)
    img[sky_rows:] = (grad_lo + (grad_hi - grad_lo) * frac)[:, None]
    img[sky_rows:] += spec.noise_std * rng.normal_array((h - sky_rows) * w).reshape(-1, w)

    n_rocks = rng.randint(*spec.rock_count_range)
    shadow_phi = rng.uniform(0.0, 2.0 * math.pi)
    rock_masks = []
    for _ in range(n_rocks):
        placed = False
        for _attempt in range(100):
            ry = rng.uniform(3.0, 7.0) * min(h, w) / 48.0
            rx = rng.uniform(3.0, 7.0) * min(h, w) / 48.0
            theta = rng.uniform(0.0, math.pi)
            lo_y, hi_y = sky_rows + 1, h - 2
            if hi_y < lo_y or w < 4:
                continue
            cy = rng.uniform(lo_y, hi_y)
            cx = rng.uniform(1.0, w - 2.0)
            m = _ellipse_mask(h, w, cy, cx, ry, rx, theta)
            if m.any():
                rock_masks.append((m, rng.uniform(rock_lo, rock_hi)))
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place rock after 100 tries ({h}x{w}, sky_rows={sky_rows})")

    if spec.domain == "moon":
        off = max(2, round(0.08 * min(h, w)))
        dy = round(off * math.sin(shadow_phi))
        dx = round(off * math.cos(shadow_phi))
        for m, _inten in rock_masks:
            sh = np.zeros_like(m)
            ys, xs = np.nonzero(m)
            ys2, xs2 = ys + dy, xs + dx
            keep = (ys2 >= 0) & (ys2 < h) & (xs2 >= 0) & (xs2 < w)
            sh[ys2[keep], xs2[keep]] = True
            sh &= ~m
            sh[:sky_rows] = False  # shadows fall on terrain only
            img[sh] -= 60.0        # shadow stays labelled terrain

    for m, inten in rock_masks:
        img[m] = inten
        mask[m] = ROCK  # overrides sky where the rock crosses the horizon

    if spec.domain == "mars" and spec.haze > 0:
        img = img * (1.0 - spec.haze) + 160.0 * spec.haze

    return LabeledScene(np.clip(np.rint(img), 0, 255).astype(np.uint8), mask, spec)


def make_splits(n_train, n_val, n_test, spec_template: SceneSpec, seed: int) -> dict:
    """Generate disjoint train/val/test scene lists from one master seed."""
    out = {}
    for name, count in (("train", n_train), ("val", n_val), ("test", n_test)):
        code = _SPLIT_CODE[name]
        out[name] = [
            generate(replace(spec_template, seed=derive(seed, code, i)))
            for i in range(count)
        ]
    return out


def class_pixel_counts(scenes) -> np.ndarray:
    counts = np.zeros(3, dtype=np.int64)
    for s in scenes:
        counts += np.bincount(s.mask.ravel(), minlength=3)[:3]
    return counts


# --------------------------------------------------------------------------
# directory archives: paired PGMs plus a JSON manifest
# --------------------------------------------------------------------------


def save_scene_dir(path, splits: dict, spec_template: SceneSpec, seed: int):
    os.makedirs(path, exist_ok=True)
    manifest = {
        "seed": seed,
        "spec": {**asdict(spec_template), "size": list(spec_template.size),
                 "rock_count_range": list(spec_template.rock_count_range)},
        "splits": {},
    }
    for name, scenes in splits.items():
        sub = os.path.join(path, name)
        os.makedirs(sub, exist_ok=True)
        entries = []
        for i, sc in enumerate(scenes):
            img_name, mask_name = f"{i:04d}.pgm", f"{i:04d}_mask.pgm"
            write_pgm(os.path.join(sub, img_name), sc.image)
            write_pgm(os.path.join(sub, mask_name), sc.mask, maxval=2)
            entries.append({"image": img_name, "mask": mask_name, "seed": sc.meta.seed})
        manifest["splits"][name] = {
            "count": len(scenes),
            "class_pixel_counts": class_pixel_counts(scenes).tolist(),
            "entries": entries,
        }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_scene_dir(path) -> dict:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    spec_d = dict(manifest["spec"])
    spec_d["size"] = tuple(spec_d["size"])
    spec_d["rock_count_range"] = tuple(spec_d["rock_count_range"])
    template = SceneSpec(**spec_d)
    splits = {}
    for name, info in manifest["splits"].items():
        scenes = []
        for entry in info["entries"]:
            img = read_pgm(os.path.join(path, name, entry["image"]))
            mask = read_pgm(os.path.join(path, name, entry["mask"]))
            scenes.append(LabeledScene(img, mask, replace(template, seed=entry["seed"])))
        splits[name] = scenes
    return splits
