"""Synthetic multi-focus training pairs.

For every foreground (colour + matte) a set of backgrounds is drawn; each pair
is rendered with the two-surface matte model, once with the foreground in focus
and once with the background in focus, together with the all-in-focus ground
truth and the three-level guidance map.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import List, Optional, Tuple
import hashlib
import logging
import os

import numpy as np
from tqdm import tqdm

from .image import as_image, check_same_shape, gaussian_blur, add_noise, encode_png, load_png, scale_and_crop, resize_bilinear
from .guidance import GUIDANCE_EPS, encode_guidance, load_guidance
from .utils import DocumentError, ValidationError, atomic_write_bytes, derive_rng, dump_yaml, find_files, load_yaml

logger = logging.getLogger(__name__)

PAIR_FILES = ("a.png", "b.png", "gt.png", "matte.png", "matte_blur.png", "gmap.png")

# 16-bit quantisation error bound, with headroom for float rounding
QUANT_TOL = 1.0 / 65535 + 1e-9


@dataclass(frozen=True)
class Foreground:
    image: str
    matte: str


@dataclass
class AssetCatalog:
    foregrounds: List[Foreground]
    backgrounds: List[str]

    def __post_init__(self):
        if not self.foregrounds:
            raise ValueError("Asset catalog has no foregrounds")
        if not self.backgrounds:
            raise ValueError("Asset catalog has no backgrounds")


@dataclass(frozen=True)
class GenConfig:
    """Dataset generation settings (defaults: 512 x 512 pairs,
    20 backgrounds per foreground, random source order)."""
    out_size: int = 512
    backgrounds_per_fg: int = 20
    sigma_range: Tuple[float, float] = (1.0, 5.0)
    swap_probability: float = 0.5
    seed: int = 0
    noise: Optional[float] = None
    independent_sigma: bool = False

    def __post_init__(self):
        lo, hi = (float(v) for v in self.sigma_range)
        object.__setattr__(self, "sigma_range", (lo, hi))
        if lo < 0.5:
            raise ValueError(f"sigma_range minimum must be >= 0.5, got {lo}")
        if hi > 10:
            raise ValueError(f"sigma_range maximum must be <= 10, got {hi}")
        if lo > hi:
            raise ValueError(f"Empty sigma_range {self.sigma_range}")
        if self.out_size < 64:
            raise ValueError(f"out_size must be >= 64, got {self.out_size}")
        if self.backgrounds_per_fg < 1:
            raise ValueError("backgrounds_per_fg must be >= 1")
        if not 0 <= self.swap_probability <= 1:
            raise ValueError("swap_probability must be in [0, 1]")
        if self.noise is not None and self.noise < 0:
            raise ValueError("noise stddev must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "sigma_range" in known:
            known["sigma_range"] = tuple(known["sigma_range"])
        return cls(**known)


@dataclass
class FusionPair:
    imgA: np.ndarray
    imgB: np.ndarray
    gt: np.ndarray
    matte_clear: np.ndarray
    matte_blur: np.ndarray
    gmap: np.ndarray
    sigma_used: float
    fg_focused_in: str  # "A" or "B"
    sigma_bg: Optional[float] = None


@dataclass(frozen=True)
class PairPlan:
    id: str
    fg_index: int
    pair_index: int
    bg_index: int
    sigma: float
    swap: bool
    sigma_bg: Optional[float] = None


def make_guidance(matte_blur, fg_focused_in: str = "A", eps: float = GUIDANCE_EPS) -> np.ndarray:
    """Three-level guidance map from the blurred matte.

    With the foreground focused in A: 1 where alpha^B = 1, 0 where alpha^B = 0,
    0.5 in between. Focused in B the 0 and 1 levels are exchanged.
    """
    m = as_image(matte_blur)
    if m.shape[2] != 1:
        raise ValueError("Blurred matte must be single-channel")
    if fg_focused_in not in ("A", "B"):
        raise ValueError(f"fg_focused_in must be 'A' or 'B', got {fg_focused_in!r}")
    if m.min() < -eps or m.max() > 1 + eps:
        raise ValueError(f"Matte values outside [0, 1]: [{m.min()}, {m.max()}]")
    one, zero = (1.0, 0.0) if fg_focused_in == "A" else (0.0, 1.0)
    gmap = np.full(m.shape, 0.5)
    gmap[m >= 1 - eps] = one
    gmap[m <= eps] = zero
    return gmap


def generate_pair(fg_color, fg_matte, bg, sigma: float, swap: bool,
                  sigma_bg: Optional[float] = None, sigma_range=None) -> FusionPair:
    """Render one pair.

    fg_color: foreground colour premultiplied by its clear matte (FG^C)
    fg_matte: clear matte alpha^C
    bg: in-focus background BG^C
    sigma: blur of foreground, background and matte
    sigma_bg: optional independent background blur
    """
    fg = as_image(fg_color)
    alpha_c = as_image(fg_matte)
    bg = as_image(bg)
    if alpha_c.shape[2] != 1:
        raise ValueError("Foreground matte must be single-channel")
    check_same_shape(fg, alpha_c, bg, names=("foreground", "matte", "background"))
    if fg.shape[2] != bg.shape[2]:
        raise ValueError("Foreground and background channel counts differ")
    if sigma_range is not None:
        lo, hi = sigma_range
        for s in (sigma, sigma_bg):
            if s is not None and not lo <= s <= hi:
                raise ValueError(f"sigma {s} outside configured range [{lo}, {hi}]")
    if sigma_bg is None:
        sigma_bg_eff = sigma
    else:
        sigma_bg_eff = sigma_bg

    fg_blur = gaussian_blur(fg, sigma)
    alpha_b = np.clip(gaussian_blur(alpha_c, sigma), 0.0, 1.0)
    bg_blur = gaussian_blur(bg, sigma_bg_eff)

    img_s1 = fg + (1 - alpha_c) * bg_blur
    img_s2 = fg_blur + (1 - alpha_b) * bg
    gt = fg + (1 - alpha_c) * bg

    fg_focused_in = "B" if swap else "A"
    if swap:
        img_a, img_b = img_s2, img_s1
    else:
        img_a, img_b = img_s1, img_s2

    return FusionPair(
        imgA=img_a,
        imgB=img_b,
        gt=gt,
        matte_clear=alpha_c,
        matte_blur=alpha_b,
        gmap=make_guidance(alpha_b, fg_focused_in),
        sigma_used=float(sigma),
        fg_focused_in=fg_focused_in,
        sigma_bg=None if sigma_bg is None else float(sigma_bg),
    )


def _asset_list(entries, root):
    paths = []
    for entry in entries:
        p = Path(entry)
        if not p.is_absolute():
            p = root / p
        if p.is_dir():
            paths.extend(str(q) for q in find_files([p], pattern="*.png"))
        else:
            paths.append(str(p))
    return paths


def load_catalog(fn) -> AssetCatalog:
    """Read a YAML asset catalog.

    foregrounds:
      - image: fg/0001.png
        matte: fg/0001_matte.png
    backgrounds:
      - bg/          # directories are searched for *.png
      - extra/bg.png

    Relative paths are resolved against the catalog directory. Generation
    settings (out_size, sigma_range, ...) may sit next to these lists; see
    `catalog_config`.
    """
    fn = Path(fn)
    doc = load_yaml(fn, with_lines=True)
    if not isinstance(doc, dict):
        raise DocumentError("catalog must be a mapping", path=fn, line=1)
    root = fn.parent
    fgs = []
    for entry in doc.get("foregrounds") or []:
        if not isinstance(entry, dict) or "image" not in entry or "matte" not in entry:
            line = entry.get("__line__") if isinstance(entry, dict) else doc["__line__"]
            raise DocumentError("each foreground needs 'image' and 'matte'", path=fn, line=line)
        image = Path(entry["image"])
        matte = Path(entry["matte"])
        fgs.append(Foreground(str(image if image.is_absolute() else root / image),
                              str(matte if matte.is_absolute() else root / matte)))
    bgs = _asset_list(doc.get("backgrounds") or [], root)
    try:
        return AssetCatalog(fgs, bgs)
    except ValueError as e:
        raise DocumentError(str(e), path=fn, line=doc["__line__"]) from e


def catalog_config(fn) -> dict:
    """GenConfig keys found at the top level of a catalog document."""
    doc = load_yaml(fn) or {}
    return {k: v for k, v in doc.items() if k in GenConfig.__dataclass_fields__}


def expected_pairs(catalog: AssetCatalog, cfg: GenConfig) -> int:
    return len(catalog.foregrounds) * cfg.backgrounds_per_fg


def plan_dataset(catalog: AssetCatalog, cfg: GenConfig) -> List[PairPlan]:
    """Draw backgrounds, sigma and source order for every pair, without I/O.

    Backgrounds are drawn without replacement per foreground (key: seed,
    foreground index); sigma and swap come from a per-pair stream (key: seed,
    foreground index, pair index).
    """
    n_bg = len(catalog.backgrounds)
    if cfg.backgrounds_per_fg > n_bg:
        raise ValueError(f"backgrounds_per_fg={cfg.backgrounds_per_fg} exceeds the {n_bg} available backgrounds")
    lo, hi = cfg.sigma_range

    plans = []
    for i in range(len(catalog.foregrounds)):
        bg_rng = derive_rng(cfg.seed, "backgrounds", i)
        chosen = bg_rng.choice(n_bg, size=cfg.backgrounds_per_fg, replace=False)
        for j, bg_index in enumerate(chosen):
            rng = derive_rng(cfg.seed, "pair", i, j)
            sigma = float(rng.uniform(lo, hi))
            swap = bool(rng.random() < cfg.swap_probability)
            sigma_bg = float(rng.uniform(lo, hi)) if cfg.independent_sigma else None
            plans.append(PairPlan(id=f"{i:04d}_{j:03d}", fg_index=i, pair_index=j,
                                  bg_index=int(bg_index), sigma=sigma, swap=swap, sigma_bg=sigma_bg))
    return plans


def load_foreground(fg: Foreground, size: int):
    """Premultiplied FG^C and alpha^C at size x size."""
    color = load_png(fg.image)
    matte = load_png(fg.matte)
    if matte.shape[2] == 3:
        matte = matte.mean(axis=2, keepdims=True)
    if color.shape[:2] != matte.shape[:2]:
        raise ValueError(f"Foreground {fg.image} and matte {fg.matte} differ in size")
    color = scale_and_crop(color, size)
    matte = np.clip(scale_and_crop(matte, size), 0.0, 1.0)
    return color * matte, matte


def load_background(fn, size: int, channels: int = 3):
    bg = resize_bilinear(load_png(fn), size, size)
    if bg.shape[2] != channels:
        bg = np.repeat(bg, channels, axis=2) if bg.shape[2] == 1 else bg.mean(axis=2, keepdims=True)
    return bg


def render_plan(plan: PairPlan, catalog: AssetCatalog, cfg: GenConfig) -> FusionPair:
    fg, matte = load_foreground(catalog.foregrounds[plan.fg_index], cfg.out_size)
    bg = load_background(catalog.backgrounds[plan.bg_index], cfg.out_size, channels=fg.shape[2])
    pair = generate_pair(fg, matte, bg, plan.sigma, plan.swap, sigma_bg=plan.sigma_bg,
                         sigma_range=cfg.sigma_range)
    if cfg.noise:
        rng = derive_rng(cfg.seed, "noise", plan.fg_index, plan.pair_index)
        pair.imgA = add_noise(pair.imgA, cfg.noise, rng)
        pair.imgB = add_noise(pair.imgB, cfg.noise, rng)
    return pair


def write_pair(pair: FusionPair, drc: Path) -> str:
    """Write the pair files and return a checksum over their bytes."""

    blobs = {
        "a.png": encode_png(pair.imgA, 16),
        "b.png": encode_png(pair.imgB, 16),
        "gt.png": encode_png(pair.gt, 16),
        "matte.png": encode_png(pair.matte_clear, 16),
        "matte_blur.png": encode_png(pair.matte_blur, 16),
        "gmap.png": encode_guidance(pair.gmap),
    }
    h = hashlib.sha256()
    for name in PAIR_FILES:
        atomic_write_bytes(drc / name, blobs[name])
        h.update(blobs[name])
    return h.hexdigest()


def _relpath(fn, out_dir: Path) -> str:
    return Path(os.path.relpath(Path(fn).resolve(), out_dir.resolve())).as_posix()


def _pair_record(plan, catalog, checksum, out_dir):
    fg = catalog.foregrounds[plan.fg_index]
    drc = Path("pairs") / plan.id
    record = {
        "id": plan.id,
        "paths": {name.split(".")[0]: (drc / name).as_posix() for name in PAIR_FILES},
        "sigma": plan.sigma,
        "swap": plan.swap,
        "fg_focused_in": "B" if plan.swap else "A",
        "foreground": {"image": _relpath(fg.image, out_dir), "matte": _relpath(fg.matte, out_dir)},
        "background": _relpath(catalog.backgrounds[plan.bg_index], out_dir),
        "checksum": checksum,
    }
    if plan.sigma_bg is not None:
        record["sigma_bg"] = plan.sigma_bg
    return record


def generate_dataset(catalog: AssetCatalog, cfg: GenConfig, out_dir, threads: int = 1,
                     progress: bool = True) -> dict:
    """Render and write every planned pair, then the manifest.

    Output layout: out_dir/pairs/<id>/{a,b,gt,matte,matte_blur,gmap}.png and
    out_dir/manifest.yaml. A failing pair is logged and listed under
    `errors` in the manifest; the rest of the run continues.
    """
    out_dir = Path(out_dir)
    plans = plan_dataset(catalog, cfg)
    logger.info("Generating %d pairs into %s", len(plans), out_dir)

    def work(plan):
        try:
            pair = render_plan(plan, catalog, cfg)
            checksum = write_pair(pair, out_dir / "pairs" / plan.id)
        except (OSError, ValueError) as e:
            logger.error("Pair %s failed: %s", plan.id, e)
            return None, {"id": plan.id, "error": f"{type(e).__name__}: {e}"}
        return _pair_record(plan, catalog, checksum, out_dir), None

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        results = list(tqdm(executor.map(work, plans), total=len(plans),
                            desc="pairs", disable=not progress))

    config = asdict(cfg)
    config["sigma_range"] = list(cfg.sigma_range)
    manifest = {
        "config": config,
        "n_foregrounds": len(catalog.foregrounds),
        "n_backgrounds": len(catalog.backgrounds),
        "n_pairs": sum(1 for record, _ in results if record is not None),
        "pairs": [record for record, _ in results if record is not None],
        "errors": [error for _, error in results if error is not None],
    }
    atomic_write_bytes(out_dir / "manifest.yaml", dump_yaml(manifest))
    return manifest


def load_manifest(out_dir) -> dict:
    fn = Path(out_dir) / "manifest.yaml"
    if not fn.exists():
        raise OSError(f"No manifest found: {fn}")
    return load_yaml(fn)


def verify_pair(record: dict, out_dir, cfg: GenConfig) -> List[str]:
    """Re-derive one pair from its sources and compare with the stored files.
    Returns a list of problems (empty when the pair is consistent)."""
    out_dir = Path(out_dir)
    problems = []
    source = record["foreground"]
    fg, matte = load_foreground(Foreground(str(out_dir / source["image"]), str(out_dir / source["matte"])), cfg.out_size)
    bg = load_background(out_dir / record["background"], cfg.out_size, channels=fg.shape[2])
    pair = generate_pair(fg, matte, bg, record["sigma"], record["swap"], sigma_bg=record.get("sigma_bg"))

    stored = {key: load_png(out_dir / path) for key, path in record["paths"].items() if key != "gmap"}
    expected = {"a": pair.imgA, "b": pair.imgB, "gt": pair.gt,
                "matte": pair.matte_clear, "matte_blur": pair.matte_blur}
    for key, img in expected.items():
        if key in ("a", "b") and cfg.noise:
            continue
        err = float(np.max(np.abs(stored[key] - np.clip(img, 0, 1))))
        if err > QUANT_TOL:
            problems.append(f"{record['id']}: {key}.png deviates by {err:.3g}")

    gmap = load_guidance(out_dir / record["paths"]["gmap"])
    if not np.array_equal(gmap, pair.gmap):
        problems.append(f"{record['id']}: gmap.png does not match the re-derived guidance map")
    band = gmap[:, :, 0] == 0.5
    m = pair.matte_blur[:, :, 0]
    soft = (m > GUIDANCE_EPS) & (m < 1 - GUIDANCE_EPS)
    mismatch = int(np.count_nonzero(band & ~soft))
    if mismatch:
        problems.append(f"{record['id']}: {mismatch} band pixels where the blurred matte is 0 or 1")
    return problems


def verify_dataset(out_dir, threads: int = 1, progress: bool = False) -> int:
    """Check every pair of a generated dataset; raises ValidationError listing
    the problems, otherwise returns the number of verified pairs."""
    manifest = load_manifest(out_dir)
    cfg = GenConfig.from_dict(manifest["config"])

    def work(record):
        try:
            return verify_pair(record, out_dir, cfg)
        except (OSError, ValueError) as e:
            return [f"{record['id']}: {e}"]

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        results = list(tqdm(executor.map(work, manifest["pairs"]), total=len(manifest["pairs"]),
                            desc="verify", disable=not progress))
    problems = [p for r in results for p in r]
    if problems:
        raise ValidationError(f"{len(problems)} problems in {out_dir}:\n  " + "\n  ".join(problems[:20]))
    return len(manifest["pairs"])
