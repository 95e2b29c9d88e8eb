"""Three-level guidance maps: estimation from a source pair, PNG storage and validation.

A guidance map is a single-channel image with values in {0, 0.5, 1}:
1 selects source A, 0 selects source B and 0.5 marks the band around the
focused/defocused boundary. On disk it is an 8-bit grayscale PNG with levels
{0, 128, 255}.
"""
from dataclasses import dataclass, field
from pathlib import Path
import logging

import numpy as np
from scipy import ndimage

from .image import BOUNDARY_MODE, as_image, check_same_shape, encode_png, load_png_raw, rgb_to_gray
from .utils import ValidationError, atomic_write_bytes

logger = logging.getLogger(__name__)

GUIDANCE_LEVELS = (0.0, 0.5, 1.0)
PNG_LEVELS = (0, 128, 255)

# tolerance for comparing float mattes against 0 and 1
GUIDANCE_EPS = 1e-6

# accepted distance from a PNG level, in 8-bit steps
PNG_TOL = 2

MAX_REPORTED = 10


def focus_measure(img, window: int = 9) -> np.ndarray:
    """Local energy of the Laplacian, averaged over a window x window box."""
    gray = rgb_to_gray(img)
    lap = ndimage.laplace(gray, mode=BOUNDARY_MODE)
    return ndimage.uniform_filter(lap ** 2, size=window, mode=BOUNDARY_MODE)


def majority_filter(decision: np.ndarray, radius: int) -> np.ndarray:
    """Boolean majority vote over a (2r+1) x (2r+1) box."""
    if radius <= 0:
        return decision.copy()
    votes = ndimage.uniform_filter(decision.astype(np.float64), size=2 * radius + 1, mode=BOUNDARY_MODE)
    return votes > 0.5


def transition_pixels(decision: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour of the other value."""
    edge = np.zeros(decision.shape, dtype=bool)
    dv = decision[1:, :] != decision[:-1, :]
    dh = decision[:, 1:] != decision[:, :-1]
    edge[1:, :] |= dv
    edge[:-1, :] |= dv
    edge[:, 1:] |= dh
    edge[:, :-1] |= dh
    return edge


def estimate_guidance(imgA, imgB, window: int = 9, band_radius: float = 6, majority_radius: int = 7) -> np.ndarray:
    """Guidance map from a classical focus-measure comparison.

    A pixel is assigned to A (1) when A's Laplacian energy is strictly larger
    than B's, otherwise to B (0). Speckle is removed with a majority filter,
    and every pixel within `band_radius` of a 0/1 transition becomes 0.5.
    """
    a = as_image(imgA)
    b = as_image(imgB)
    check_same_shape(a, b, names=("imgA", "imgB"))
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    if band_radius < 0 or majority_radius < 0:
        raise ValueError("band_radius and majority_radius must be >= 0")

    decision = focus_measure(a, window) > focus_measure(b, window)
    decision = majority_filter(decision, majority_radius)

    gmap = decision.astype(np.float64)
    edge = transition_pixels(decision)
    if edge.any():
        dist = ndimage.distance_transform_edt(~edge)
        gmap[dist <= band_radius] = 0.5
    logger.debug("Estimated guidance: %.1f%% A, %.1f%% band",
                 100 * np.mean(gmap == 1), 100 * np.mean(gmap == 0.5))
    return gmap[:, :, np.newaxis]


def _offending(mask: np.ndarray):
    rows, cols = np.nonzero(mask.reshape(mask.shape[:2]))
    return [(int(r), int(c)) for r, c in zip(rows[:MAX_REPORTED], cols[:MAX_REPORTED])]


def _snap(values: np.ndarray, centres, levels, tol: float, what: str) -> np.ndarray:
    out = np.full(values.shape, np.nan)
    for centre, level in zip(centres, levels):
        out[np.abs(values - centre) <= tol] = level
    bad = np.isnan(out)
    if bad.any():
        n = int(np.count_nonzero(bad))
        raise ValidationError(f"{what}: {n} off-level pixels, first at (row, col) {_offending(bad)}")
    return out


def quantize_guidance(soft, tol: float = PNG_TOL / 255) -> np.ndarray:
    """Snap values within `tol` of 0, 0.5 or 1 to that level.
    Raises ValidationError for anything further away."""
    soft = as_image(soft)
    if soft.shape[2] != 1:
        raise ValueError("Guidance map must be single-channel")
    return _snap(soft, GUIDANCE_LEVELS, GUIDANCE_LEVELS, tol, "guidance map")


def encode_guidance(gmap) -> bytes:
    """8-bit PNG bytes with levels {0, 128, 255}."""
    gmap = as_image(gmap)
    check_levels(gmap)
    return encode_png(np.where(gmap == 0.5, 128 / 255, gmap), bit_depth=8)


def save_guidance(gmap, fn):
    atomic_write_bytes(fn, encode_guidance(gmap))
    logger.debug("Wrote guidance map %s", fn)


def load_guidance(fn) -> np.ndarray:
    """Read an 8-bit grayscale guidance PNG; values within 2 of {0, 128, 255}
    are snapped to {0, 0.5, 1}."""
    raw = load_png_raw(fn)
    if raw.ndim != 2:
        if np.all(raw == raw[:, :, :1]):
            raw = raw[:, :, 0]
        else:
            raise ValidationError(f"{fn}: guidance map must be grayscale")
    if raw.dtype != np.uint8:
        raise ValidationError(f"{fn}: guidance map must be 8-bit, got {raw.dtype}")
    gmap = _snap(raw.astype(np.int32), PNG_LEVELS, GUIDANCE_LEVELS, PNG_TOL, str(fn))
    return gmap[:, :, np.newaxis]


def check_levels(gmap):
    """Raise ValidationError unless every pixel is exactly 0, 0.5 or 1."""
    g = as_image(gmap)
    if g.shape[2] != 1:
        raise ValueError("Guidance map must be single-channel")
    bad = ~np.isin(g[:, :, 0], GUIDANCE_LEVELS)
    if bad.any():
        n = int(np.count_nonzero(bad))
        raise ValidationError(f"{n} pixels not in {{0, 0.5, 1}}, first at (row, col) {_offending(bad)}")


def check_band(gmap, radius: float) -> bool:
    """True when every 0.5 pixel lies within `radius` of both a 0 and a 1
    pixel, or when the map has no band or a single decided level."""
    g = as_image(gmap)[:, :, 0]
    band = g == 0.5
    if not band.any():
        return True
    zeros = g == 0
    ones = g == 1
    if not zeros.any() and not ones.any():
        return True
    if not zeros.any() or not ones.any():
        return False
    d0 = ndimage.distance_transform_edt(~zeros)
    d1 = ndimage.distance_transform_edt(~ones)
    return bool(np.all(d0[band] <= radius) and np.all(d1[band] <= radius))


@dataclass
class GuidanceReport:
    shape: tuple
    counts: dict = field(default_factory=dict)
    band_consistent: bool = True

    @property
    def constant(self) -> bool:
        return sum(1 for n in self.counts.values() if n) <= 1

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "counts": {str(k): v for k, v in self.counts.items()},
            "constant": self.constant,
            "band_consistent": self.band_consistent,
        }

    def __str__(self):
        h, w = self.shape
        total = h * w
        lines = [f"Guidance map {w}x{h}"]
        for level, n in self.counts.items():
            lines.append(f"  {level:>4}: {n:8d} ({100 * n / total:5.1f}%)")
        lines.append(f"  band consistent: {self.band_consistent}")
        return "\n".join(lines)


def validate_guidance(gmap, band_radius: float = 6) -> GuidanceReport:
    """Check level closure (ValidationError on failure) and report the level
    histogram. The band check uses 2 * band_radius + 1 and is informational."""
    check_levels(gmap)
    g = as_image(gmap)[:, :, 0]
    counts = {level: int(np.count_nonzero(g == level)) for level in GUIDANCE_LEVELS}
    consistent = check_band(gmap, 2 * band_radius + 1)
    if not consistent:
        logger.info("Guidance band is not enclosed by both levels within %s px", 2 * band_radius + 1)
    return GuidanceReport(shape=g.shape, counts=counts, band_consistent=consistent)
