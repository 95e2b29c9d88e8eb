"""Guidance-map fusion.

    Fusion_Ini = gmap * A + (1 - gmap) * B
    Bmap       = 1 - |2 gmap - 1|
    Fusion_Fin = clip(Fusion_Ini + Bmap * C, 0, 1)

The correction C stands in for a learned boundary refinement: zero, a signed
correction image read from file, or the oracle GT - Fusion_Ini for synthetic
pairs with known ground truth.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional
import logging

import numpy as np
from tqdm import tqdm

from .image import as_image, check_same_shape, encode_png, load_png, save_png
from .guidance import check_levels, estimate_guidance, load_guidance, save_guidance
from .metrics import MetricsReport, compute_metrics
from .utils import atomic_write_bytes

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CorrectionSource:
    """Boundary correction: kind is 'zero', 'file' or 'oracle'.

    For 'file', `image` holds the signed correction in [-1, 1]; for
    'oracle' it holds the ground truth.
    """
    kind: str = "zero"
    image: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("zero", "file", "oracle"):
            raise ValueError(f"Unknown correction kind: {self.kind!r}")
        if self.kind != "zero" and self.image is None:
            what = "ground truth" if self.kind == "oracle" else "correction image"
            raise ValueError(f"{self.kind} correction requires a {what}")

    @classmethod
    def zero(cls) -> "CorrectionSource":
        return cls("zero")

    @classmethod
    def from_array(cls, correction) -> "CorrectionSource":
        correction = as_image(correction)
        if correction.min() < -1 or correction.max() > 1:
            raise ValueError("Correction values outside [-1, 1]")
        return cls("file", correction)

    @classmethod
    def from_file(cls, fn) -> "CorrectionSource":
        return cls.from_array(load_correction(fn))

    @classmethod
    def oracle(cls, gt) -> "CorrectionSource":
        if gt is None:
            raise ValueError("oracle correction requires a ground truth image")
        return cls("oracle", as_image(gt))

    def resolve(self, fusion_ini: np.ndarray) -> np.ndarray:
        """The correction image for `fusion_ini`."""
        if self.kind == "zero":
            return np.zeros_like(fusion_ini)
        check_same_shape(fusion_ini, self.image, names=("fusion", f"{self.kind} correction"))
        if self.kind == "oracle":
            if self.image.shape[2] != fusion_ini.shape[2]:
                raise ValueError("Ground truth and sources differ in channel count")
            return self.image - fusion_ini
        return np.broadcast_to(self.image, fusion_ini.shape)


def _sources(imgA, imgB, gmap):
    a = as_image(imgA)
    b = as_image(imgB)
    g = as_image(gmap)
    check_same_shape(a, b, names=("imgA", "imgB"), channels=True)
    check_same_shape(a, g, names=("imgA", "gmap"))
    if g.shape[2] != 1:
        raise ValueError("Guidance map must be single-channel")
    return a, b, g


def initial_fusion(imgA, imgB, gmap) -> np.ndarray:
    a, b, g = _sources(imgA, imgB, gmap)
    return g * a + (1 - g) * b


def boundary_map(gmap) -> np.ndarray:
    """1 on the 0.5 band, 0 on the decided levels."""
    g = as_image(gmap)
    return 1 - np.abs(2 * g - 1)


def final_fusion(imgA, imgB, gmap, corr: Optional[CorrectionSource] = None) -> np.ndarray:
    corr = corr or CorrectionSource.zero()
    ini = initial_fusion(imgA, imgB, gmap)
    if corr.kind == "zero":
        return ini
    bmap = boundary_map(gmap)
    return np.clip(ini + bmap * corr.resolve(ini), 0.0, 1.0)


def encode_correction(correction) -> bytes:
    """16-bit PNG of C / 2 + 0.5."""
    c = as_image(correction)
    if c.min() < -1 or c.max() > 1:
        raise ValueError("Correction values outside [-1, 1]")
    return encode_png(c / 2 + 0.5, bit_depth=16)


def save_correction(correction, fn):
    atomic_write_bytes(fn, encode_correction(correction))


def load_correction(fn) -> np.ndarray:
    return load_png(fn) * 2 - 1


def fuse_pair(a_fn, b_fn, out_fn, gmap_fn=None, corr: Optional[CorrectionSource] = None,
              gmap_out=None, metrics_fn=None, intensity_scale: float = 1.0, **estimate_kwargs):
    """Load a source pair, obtain the guidance map (file or estimate), fuse
    and write the result as a 16-bit PNG.

    Returns the fused image and, with `metrics_fn`, the metrics report
    written there.
    """
    a = load_png(a_fn)
    b = load_png(b_fn)
    if gmap_fn is not None:
        gmap = load_guidance(gmap_fn)
        logger.info("Guidance map from %s", gmap_fn)
    else:
        gmap = estimate_guidance(a, b, **estimate_kwargs)
        logger.info("Guidance map estimated from the sources")
    if gmap_out is not None:
        save_guidance(gmap, gmap_out)

    fused = final_fusion(a, b, gmap, corr)
    save_png(fused, out_fn, bit_depth=16)

    report = None
    if metrics_fn is not None:
        values = compute_metrics(fused, intensity_scale=intensity_scale)
        row = {"method": "fused", "id": Path(out_fn).stem, "path": str(out_fn), **values,
               "degenerate": bool(fused.max() <= 0)}
        report = MetricsReport(rows=[row], intensity_scale=intensity_scale)
        report.write(metrics_fn)
    return fused, report


def fuse_dataset(dataset_dir, out_dir, oracle: bool = False, threads: int = 1, progress: bool = True) -> dict:
    """Fuse every pair of a generated dataset with its stored guidance map.

    Writes out_dir/<id>.png and returns {"written": [...], "errors": [...]}.
    """
    from .dataset import load_manifest

    dataset_dir = Path(dataset_dir)
    out_dir = Path(out_dir)
    manifest = load_manifest(dataset_dir)

    def work(record):
        paths = {key: dataset_dir / path for key, path in record["paths"].items()}
        out_fn = out_dir / f"{record['id']}.png"
        try:
            corr = CorrectionSource.oracle(load_png(paths["gt"])) if oracle else None
            gmap = load_guidance(paths["gmap"])
            check_levels(gmap)
            fused = final_fusion(load_png(paths["a"]), load_png(paths["b"]), gmap, corr)
            save_png(fused, out_fn, bit_depth=16)
        except (OSError, ValueError) as e:
            logger.error("Pair %s failed: %s", record["id"], e)
            return None, {"id": record["id"], "error": str(e)}
        return str(out_fn), None

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        results = list(tqdm(executor.map(work, manifest["pairs"]), total=len(manifest["pairs"]),
                            desc="fuse", disable=not progress))
    return {
        "written": [fn for fn, _ in results if fn is not None],
        "errors": [err for _, err in results if err is not None],
    }
