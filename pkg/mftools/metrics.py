"""No-reference fusion quality metrics and a batch evaluation harness.

All four metrics work on the grayscale (unweighted channel mean) image.
For an M x N image, sums run over rows m in [0, M-2] and columns n in
[0, N-2] with forward differences, normalised by (M-1)(N-1):

    AG   mean of sqrt(dI/dm^2 + dI/dn^2) / 4
    MSD  sqrt(sum (I - mean(I))^2) / ((M-1)(N-1))
    GLD  mean of |I(m,n) - I(m+1,n)| + |I(m,n) - I(m,n+1)|
    LIF  (2/MN) sum min(p, 1-p), p = sin(pi/2 (1 - I/I_max))
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Union
import logging
import math
import warnings

import numpy as np
import pandas as pd
from tqdm import tqdm

from .image import as_image, load_png, rgb_to_gray
from .utils import atomic_write_bytes, dump_yaml, find_files

logger = logging.getLogger(__name__)

METRICS = ("AG", "LIF", "MSD", "GLD")

# +1: larger is better, -1: smaller is better
DIRECTION = {"AG": 1, "LIF": -1, "MSD": 1, "GLD": 1}


class DegenerateImageWarning(UserWarning):
    """Metric evaluated on an image where it is undefined (all-zero LIF)."""


def _gray(img) -> np.ndarray:
    if isinstance(img, np.ndarray) and img.ndim == 2:
        return as_image(img)[:, :, 0]
    return rgb_to_gray(img)


def _check_size(gray):
    m, n = gray.shape
    if m < 2 or n < 2:
        raise ValueError(f"Metrics need at least a 2x2 image, got {m}x{n}")
    return m, n


def metric_lif(img) -> float:
    gray = _gray(img)
    imax = gray.max()
    if imax <= 0:
        warnings.warn("LIF of an all-zero image is undefined, returning 0", DegenerateImageWarning, stacklevel=2)
        return 0.0
    p = np.sin(np.pi / 2 * (1 - gray / imax))
    return float(2 * np.sum(np.minimum(p, 1 - p)) / gray.size)


def metric_ag(img) -> float:
    gray = _gray(img)
    m, n = _check_size(gray)
    base = gray[:-1, :-1]
    dm = gray[1:, :-1] - base
    dn = gray[:-1, 1:] - base
    return float(np.sum(0.25 * np.sqrt(dm ** 2 + dn ** 2)) / ((m - 1) * (n - 1)))


def metric_msd(img) -> float:
    gray = _gray(img)
    m, n = _check_size(gray)
    dev = gray[:-1, :-1] - gray.mean()
    return float(math.sqrt(np.sum(dev ** 2)) / ((m - 1) * (n - 1)))


def metric_gld(img) -> float:
    gray = _gray(img)
    m, n = _check_size(gray)
    base = gray[:-1, :-1]
    total = np.abs(base - gray[1:, :-1]) + np.abs(base - gray[:-1, 1:])
    return float(np.sum(total) / ((m - 1) * (n - 1)))


def compute_metrics(img, intensity_scale: float = 1.0) -> Dict[str, float]:
    """All four metrics of one image. `intensity_scale` multiplies the
    [0, 1] intensities first (255 gives 8-bit units; LIF is unaffected)."""
    if intensity_scale <= 0:
        raise ValueError(f"intensity_scale must be > 0, got {intensity_scale}")
    gray = _gray(img) * intensity_scale
    return {
        "AG": metric_ag(gray),
        "LIF": metric_lif(gray),
        "MSD": metric_msd(gray),
        "GLD": metric_gld(gray),
    }


@dataclass
class MetricsReport:
    """Per-image metric rows for one or more methods.

    rows: dicts with keys method, id, path, AG, LIF, MSD, GLD, degenerate
    errors: dicts with keys method, path, error
    """
    rows: List[dict] = field(default_factory=list)
    errors: List[dict] = field(default_factory=list)
    intensity_scale: float = 1.0

    @property
    def ok(self) -> bool:
        return not self.errors

    @property
    def methods(self) -> List[str]:
        return list(dict.fromkeys(row["method"] for row in self.rows))

    def frame(self) -> pd.DataFrame:
        columns = ["method", "id", "path", *METRICS, "degenerate"]
        return pd.DataFrame(self.rows, columns=columns)

    def aggregate(self) -> pd.DataFrame:
        """Per-method means, methods in order of appearance."""
        df = self.frame()
        return df.groupby("method", sort=False)[list(METRICS)].mean()

    def wins(self) -> pd.DataFrame:
        """Number of images on which a method is strictly best among all
        methods, per metric. Only images evaluated for every method count."""
        df = self.frame()
        methods = self.methods
        out = pd.DataFrame(0, index=pd.Index(methods, name="method"), columns=list(METRICS))
        if len(methods) < 2:
            return out
        for metric in METRICS:
            table = df.drop_duplicates(["method", "id"]).pivot(index="id", columns="method", values=metric)[methods].dropna()
            values = table.to_numpy() * DIRECTION[metric]
            best = values.max(axis=1, keepdims=True)
            is_best = values == best
            unique = is_best.sum(axis=1) == 1
            counts = (is_best & unique[:, np.newaxis]).sum(axis=0)
            out[metric] = counts
        return out

    def to_dict(self) -> dict:
        agg = self.aggregate()
        wins = self.wins()
        return {
            "intensity_scale": self.intensity_scale,
            "methods": {
                method: {
                    "n_images": int(sum(1 for row in self.rows if row["method"] == method)),
                    "mean": {k: float(agg.loc[method, k]) for k in METRICS},
                    "wins": {k: int(wins.loc[method, k]) for k in METRICS},
                }
                for method in self.methods
            },
            "images": [{k: (v.item() if isinstance(v, np.generic) else v) for k, v in row.items()}
                       for row in self.rows],
            "errors": list(self.errors),
        }

    def write(self, fn):
        """Write the report; the format follows the suffix (.yaml, .csv, .xlsx)."""
        fn = Path(fn)
        suffix = fn.suffix.lower()
        if suffix in (".yaml", ".yml"):
            atomic_write_bytes(fn, dump_yaml(self.to_dict()))
        elif suffix == ".csv":
            atomic_write_bytes(fn, self.frame().to_csv(index=False).encode())
        elif suffix == ".xlsx":
            fn.parent.mkdir(parents=True, exist_ok=True)
            with pd.ExcelWriter(fn) as writer:
                self.frame().to_excel(writer, sheet_name="images", index=False)
                self.aggregate().to_excel(writer, sheet_name="mean")
                self.wins().to_excel(writer, sheet_name="wins")
        else:
            raise ValueError(f"Unknown report format: {fn.suffix} (use .yaml, .csv or .xlsx)")
        logger.info("Wrote metrics report %s", fn)


def format_table(report: MetricsReport) -> str:
    """Method x metric table; each cell reads `mean (wins)` when several
    methods are compared, the best mean per metric is marked with *."""
    if not report.rows:
        return "No images evaluated"
    agg = report.aggregate()
    wins = report.wins()
    several = len(report.methods) > 1
    width = max(12, *(len(m) for m in report.methods))

    lines = [f"{'method':<{width}}" + "".join(f"{k:>18}" for k in METRICS)]
    best = {k: (agg[k].idxmax() if DIRECTION[k] > 0 else agg[k].idxmin()) for k in METRICS}
    for method in report.methods:
        line = f"{method:<{width}}"
        for k in METRICS:
            cell = f"{agg.loc[method, k]:.4f}"
            if several:
                cell += f" ({wins.loc[method, k]})"
                if best[k] == method:
                    cell += "*"
            line += f"{cell:>18}"
        lines.append(line)
    return "\n".join(lines)


def format_summary(report: MetricsReport) -> str:
    """Mean +- standard error per method and metric."""
    try:
        import uncertainties as u
    except ImportError:
        u = None

    df = report.frame()
    lines = []
    for method, group in df.groupby("method", sort=False):
        n = len(group)
        parts = []
        for k in METRICS:
            mean = group[k].mean()
            err = group[k].std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
            if u is not None and err > 0:
                parts.append(f"{k}={u.ufloat(mean, err):.2uS}")
            else:
                parts.append(f"{k}={mean:.4f}")
        lines.append(f"{method} (n={n}): " + ", ".join(parts))
    return "\n".join(lines)


Inputs = Union[str, Path, Sequence[Union[str, Path]]]


def _image_id(fn: Path, root: Path) -> str:
    try:
        rel = fn.relative_to(root)
    except ValueError:
        rel = Path(fn.name)
    return rel.with_suffix("").as_posix()


def _collect(label: str, inputs: Inputs):
    if isinstance(inputs, (str, Path)):
        inputs = [inputs]
    jobs = []
    for entry in inputs:
        entry = Path(entry)
        root = entry if entry.is_dir() else entry.parent
        for fn in find_files([entry]):
            jobs.append((label, _image_id(Path(fn), root), Path(fn)))
    return jobs


def evaluate_batch(methods: Dict[str, Inputs], intensity_scale: float = 1.0,
                   threads: int = 1, progress: bool = False) -> MetricsReport:
    """Evaluate every image of every method.

    methods: label -> file, directory or glob (or a list of those). Images
        are matched across methods by their path relative to the directory
        they were found in.
    Unreadable or too small images are recorded in `report.errors` and skipped.
    """
    jobs = [job for label, inputs in methods.items() for job in _collect(label, inputs)]
    logger.info("Evaluating %d images for %d methods", len(jobs), len(methods))

    def work(job):
        label, image_id, fn = job
        try:
            img = load_png(fn)
            values = compute_metrics(img, intensity_scale=intensity_scale)
        except (OSError, ValueError) as e:
            logger.warning("Skipping %s: %s", fn, e)
            return None, {"method": label, "path": str(fn), "error": str(e)}
        degenerate = bool(img.max() <= 0)
        if degenerate:
            logger.warning("%s: all-zero image, LIF set to 0", fn)
        return {"method": label, "id": image_id, "path": str(fn), **values, "degenerate": degenerate}, None

    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        results = list(tqdm(executor.map(work, jobs), total=len(jobs), desc="evaluate", disable=not progress))

    return MetricsReport(
        rows=[row for row, _ in results if row is not None],
        errors=[error for _, error in results if error is not None],
        intensity_scale=intensity_scale,
    )
