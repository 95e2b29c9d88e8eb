"""Defocus models: one-parameter (space-invariant PSF), two-parameter boundary
model, and the layered alpha-matte model with front-to-back matte aggregation.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional
import logging

import numpy as np
from scipy import ndimage

from .image import as_image, check_same_shape, gaussian_blur, add_noise, load_png
from .utils import DocumentError, load_yaml

logger = logging.getLogger(__name__)

PREMULTIPLY_TOL = 1e-9


@dataclass
class Layer:
    """One surface parallel to the focal plane.

    surface: premultiplied colour (colour x clear matte), (H, W, C)
    matte: clear matte in [0, 1], (H, W, 1)
    sigma: Gaussian defocus for this layer in pixels
    """
    surface: np.ndarray
    matte: np.ndarray
    sigma: float = 0.0

    def __post_init__(self):
        self.surface = as_image(self.surface)
        self.matte = as_image(self.matte)
        if self.matte.shape[2] != 1:
            raise ValueError("Layer matte must be single-channel")
        check_same_shape(self.surface, self.matte, names=("surface", "matte"))
        if self.matte.min() < 0 or self.matte.max() > 1:
            raise ValueError("Layer matte values must be in [0, 1]")
        if np.any(self.surface > self.matte + PREMULTIPLY_TOL):
            raise ValueError("Layer surface is not premultiplied by its matte")
        self.sigma = float(self.sigma)
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")

    @classmethod
    def from_color(cls, color, matte=None, sigma=0.0) -> "Layer":
        """Build a layer from a straight (non-premultiplied) colour image.
        Without a matte the layer is opaque."""
        color = np.clip(as_image(color), 0.0, 1.0)
        if matte is None:
            matte = np.ones(color.shape[:2] + (1,))
        matte = as_image(matte)
        if matte.shape[2] == 3:
            matte = matte.mean(axis=2, keepdims=True)
        return cls(surface=color * matte, matte=matte, sigma=sigma)

    @property
    def shape(self):
        return self.surface.shape[:2]


@dataclass
class Scene:
    """Layers ordered front (index 0, nearest the camera) to back."""
    layers: List[Layer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("A scene needs at least one layer")
        shapes = {layer.shape for layer in self.layers}
        if len(shapes) != 1:
            raise ValueError(f"Dimension mismatch between scene layers: {sorted(shapes)}")
        channels = {layer.surface.shape[2] for layer in self.layers}
        if len(channels) != 1:
            raise ValueError("All scene layers must have the same number of channels")

    @property
    def shape(self):
        return self.layers[0].shape

    @property
    def sigmas(self):
        return [layer.sigma for layer in self.layers]

    def with_sigmas(self, sigmas) -> "Scene":
        if len(sigmas) != len(self.layers):
            raise ValueError("One sigma per layer required")
        return Scene([Layer(layer.surface, layer.matte, s) for layer, s in zip(self.layers, sigmas)])

    def in_focus(self) -> "Scene":
        """Same scene with every layer sharp (the all-in-focus reference)."""
        return self.with_sigmas([0.0] * len(self.layers))


@dataclass
class BoundaryLineScene:
    """Two image regions split by the line a*x + b*y + c = 0 (x = column,
    y = row, pixel centers at integer coordinates). Side A is where
    a*x + b*y + c >= 0."""
    fA: np.ndarray
    fB: np.ndarray
    line: tuple
    sigmaA: float = 0.0
    sigmaB: float = 0.0

    def __post_init__(self):
        self.fA = as_image(self.fA)
        self.fB = as_image(self.fB)
        check_same_shape(self.fA, self.fB, names=("fA", "fB"), channels=True)
        a, b, c = (float(v) for v in self.line)
        if a == 0 and b == 0:
            raise ValueError("Boundary line needs (a, b) != (0, 0)")
        self.line = (a, b, c)
        if self.sigmaA < 0 or self.sigmaB < 0:
            raise ValueError("sigmas must be >= 0")

    def side_a(self) -> np.ndarray:
        """u(ax + by + c) as an (H, W, 1) 0/1 mask; boundary pixels belong to A."""
        a, b, c = self.line
        h, w = self.fA.shape[:2]
        y, x = np.mgrid[0:h, 0:w].astype(np.float64)
        return (a * x + b * y + c >= 0).astype(np.float64)[:, :, np.newaxis]


@dataclass
class LayerStack:
    """Intermediate products of the alpha-matte render, one entry per layer."""
    image: np.ndarray
    surfaces: List[np.ndarray]   # S_n, blurred premultiplied surfaces
    mattes0: List[np.ndarray]    # alpha_n^0, blurred clear mattes
    mattes: List[np.ndarray]     # alpha_n after front-to-back aggregation
    layer_images: List[np.ndarray]  # I_n


def render_one_param(img, sigma: float, noise: float = 0.0, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Space-invariant PSF: I = G(sigma) * f (+ n)."""
    out = gaussian_blur(img, sigma)
    if noise:
        if rng is None:
            raise ValueError("A random generator is required for the noise stage")
        out = add_noise(out, noise, rng)
    return out


def render_two_param(scene: BoundaryLineScene) -> np.ndarray:
    """I = (fA u) * G(sigmaA) + (fB (1 - u)) * G(sigmaB)."""
    u = scene.side_a()
    return gaussian_blur(scene.fA * u, scene.sigmaA) + gaussian_blur(scene.fB * (1 - u), scene.sigmaB)


def _blur_layer(layer: Layer):
    surface = gaussian_blur(layer.surface, layer.sigma)
    matte = np.clip(gaussian_blur(layer.matte, layer.sigma), 0.0, 1.0)
    return surface, matte


def render_layers(scene: Scene, threads: int = 1) -> LayerStack:
    """Alpha-matte model with all intermediates.

    Per-layer blurs are independent and may run in parallel; the matte
    aggregation is a strict front-to-back fold.
    """
    if threads > 1 and len(scene.layers) > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            blurred = list(executor.map(_blur_layer, scene.layers))
    else:
        blurred = [_blur_layer(layer) for layer in scene.layers]

    h, w = scene.shape
    coverage = np.zeros((h, w, 1))  # sum of alpha_t for t < n
    image = np.zeros_like(scene.layers[0].surface)

    surfaces, mattes0, mattes, layer_images = [], [], [], []
    for surface, matte0 in blurred:
        visible = np.maximum(1.0 - coverage, 0.0)
        matte = matte0 * visible
        layer_image = visible * surface
        image = image + layer_image
        coverage = coverage + matte

        surfaces.append(surface)
        mattes0.append(matte0)
        mattes.append(matte)
        layer_images.append(layer_image)

    return LayerStack(image=image, surfaces=surfaces, mattes0=mattes0, mattes=mattes, layer_images=layer_images)


def render_alpha_matte(scene: Scene, threads: int = 1):
    """Returns (image, mattes alpha_n, layer images I_n)."""
    stack = render_layers(scene, threads=threads)
    return stack.image, stack.mattes, stack.layer_images


def compose_two_surface(fg: Layer, bg: Layer) -> np.ndarray:
    """I = S_FG + (1 - alpha_FG) S_BG with both layers blurred by their own sigma."""
    check_same_shape(fg.surface, bg.surface, names=("fg", "bg"), channels=True)
    s_fg, a_fg = _blur_layer(fg)
    s_bg, _ = _blur_layer(bg)
    return s_fg + np.maximum(1.0 - a_fg, 0.0) * s_bg


def flatten_scene(scene: Scene):
    """All-in-focus composite and the visible fraction of every layer."""
    stack = render_layers(scene.in_focus())
    return stack.image, stack.mattes


def render_one_param_regions(scene: Scene) -> np.ndarray:
    """One-parameter model applied region by region: the all-in-focus image is
    reblurred with each layer's sigma and kept where that layer is visible."""
    flat, visible = flatten_scene(scene)
    out = np.zeros_like(flat)
    for layer, vis in zip(scene.layers, visible):
        out = out + vis * render_one_param(flat, layer.sigma)
    return out


def render_two_param_regions(scene: Scene) -> np.ndarray:
    """Two-parameter model generalised to N spliced regions: every visible
    region is cut out of the all-in-focus image and blurred on its own."""
    flat, visible = flatten_scene(scene)
    out = np.zeros_like(flat)
    for layer, vis in zip(scene.layers, visible):
        out = out + gaussian_blur(flat * vis, layer.sigma)
    return out


OBJECT_COLORS = (
    (0.85, 0.20, 0.15),  # object 1, near
    (0.95, 0.85, 0.20),  # object 2, middle
    (0.20, 0.35, 0.80),  # object 3, far
)

# (top, bottom, left, right) as fractions of the image size
OBJECT_BOXES = (
    (0.40, 0.88, 0.08, 0.35),
    (0.25, 0.75, 0.25, 0.60),
    (0.15, 0.80, 0.45, 0.92),
)


def object_box(index: int, size: int = 256):
    """Pixel rectangle (top, bottom, left, right), bottom/right exclusive,
    of object `index` (1-based) in the three-object scene."""
    top, bottom, left, right = OBJECT_BOXES[index - 1]
    return tuple(int(round(f * size)) for f in (top, bottom, left, right))


def backdrop_texture(size: int = 256) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    pattern = np.sin(2 * np.pi * x / 24) * np.sin(2 * np.pi * y / 24)
    g = 0.55 + 0.2 * pattern
    return np.stack([0.6 * g, g, 0.7 * g], axis=2)


def make_three_object_scene(focus_layer: int, sigma_near: float = 4.0, sigma_far: float = 2.0,
                            size: int = 256, all_in_focus: bool = False) -> Scene:
    """Three flat-coloured rectangles at three depths in front of an opaque
    textured backdrop (layer 4).

    The focused layer is sharp; layers in front of it get `sigma_near`,
    layers behind it (including the backdrop) get `sigma_far`.
    """
    if focus_layer not in (1, 2, 3):
        raise ValueError(f"focus_layer must be 1, 2 or 3, got {focus_layer}")
    layers = []
    for n, color in enumerate(OBJECT_COLORS, start=1):
        top, bottom, left, right = object_box(n, size)
        matte = np.zeros((size, size, 1))
        matte[top:bottom, left:right] = 1.0
        surface = matte * np.asarray(color)
        layers.append(Layer(surface, matte))
    layers.append(Layer(backdrop_texture(size), np.ones((size, size, 1))))

    sigmas = []
    for n in range(1, len(layers) + 1):
        if all_in_focus or n == focus_layer:
            sigmas.append(0.0)
        elif n < focus_layer:
            sigmas.append(sigma_near)
        else:
            sigmas.append(sigma_far)
    return Scene(layers).with_sigmas(sigmas)


make_fig7_scene = make_three_object_scene


def _require(d, key, fn):
    if key not in d:
        raise DocumentError(f"missing key '{key}'", path=fn, line=d.get("__line__"))
    return d[key]


def _number(d, key, fn, default=None):
    value = d.get(key, default)
    if value is None:
        raise DocumentError(f"missing key '{key}'", path=fn, line=d.get("__line__"))
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise DocumentError(f"'{key}' must be a number, got {value!r}", path=fn, line=d.get("__line__"))
    if value < 0 and key.startswith("sigma"):
        raise DocumentError(f"'{key}' must be >= 0", path=fn, line=d.get("__line__"))
    return value


def load_scene(fn):
    """Parse a YAML scene description.

    kind: layers
    layers:            # front to back
      - surface: fg.png
        matte: fg_matte.png   # optional, opaque if absent
        sigma: 3.0
        premultiplied: false  # surface already multiplied by matte

    kind: boundary
    a: a.png
    b: b.png
    line: [1.0, 0.0, -128.0]  # a*x + b*y + c = 0, x = column, y = row
    sigma_a: 3.0
    sigma_b: 0.0

    Image paths are relative to the scene file. Returns a `Scene` or a
    `BoundaryLineScene`.
    """
    fn = Path(fn)
    doc = load_yaml(fn, with_lines=True)
    if not isinstance(doc, dict):
        raise DocumentError("scene document must be a mapping", path=fn, line=1)
    root = fn.parent
    kind = doc.get("kind", "layers")

    if kind == "boundary":
        line = _require(doc, "line", fn)
        if not isinstance(line, list) or len(line) != 3:
            raise DocumentError("'line' must be a list [a, b, c]", path=fn, line=doc["__line__"])
        fA = load_png(root / _require(doc, "a", fn))
        fB = load_png(root / _require(doc, "b", fn))
        try:
            return BoundaryLineScene(fA, fB, tuple(line),
                                     sigmaA=_number(doc, "sigma_a", fn, 0.0),
                                     sigmaB=_number(doc, "sigma_b", fn, 0.0))
        except ValueError as e:
            raise DocumentError(str(e), path=fn, line=doc["__line__"]) from e

    if kind != "layers":
        raise DocumentError(f"unknown scene kind '{kind}'", path=fn, line=doc["__line__"])

    entries = _require(doc, "layers", fn)
    if not isinstance(entries, list) or not entries:
        raise DocumentError("'layers' must be a non-empty list", path=fn, line=doc["__line__"])

    layers = []
    for entry in entries:
        if not isinstance(entry, dict):
            raise DocumentError("each layer must be a mapping", path=fn, line=doc["__line__"])
        sigma = _number(entry, "sigma", fn, 0.0)
        surface = load_png(root / _require(entry, "surface", fn))
        matte = load_png(root / entry["matte"]) if entry.get("matte") else None
        try:
            if entry.get("premultiplied", False):
                if matte is None:
                    matte = np.ones(surface.shape[:2] + (1,))
                if matte.shape[2] == 3:
                    matte = matte.mean(axis=2, keepdims=True)
                layers.append(Layer(surface, matte, sigma))
            else:
                layers.append(Layer.from_color(surface, matte, sigma))
        except ValueError as e:
            raise DocumentError(str(e), path=fn, line=entry["__line__"]) from e

    try:
        scene = Scene(layers)
    except ValueError as e:
        raise DocumentError(str(e), path=fn, line=doc["__line__"]) from e
    logger.info("Loaded scene with %d layers from %s", len(layers), fn)
    return scene


def object_region(scene: Scene, index: int) -> np.ndarray:
    """Boolean mask of pixels where layer `index` (1-based) is fully visible
    in the all-in-focus composite."""
    _, visible = flatten_scene(scene)
    return visible[index - 1][:, :, 0] >= 1.0


def within(mask: np.ndarray, radius: int) -> np.ndarray:
    """Pixels within Chebyshev distance `radius` of `mask`."""
    if radius <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool), iterations=radius)


def plot_layers(scene: Scene, stack: LayerStack, fn):
    """Panel with one row per layer: S^c, alpha^c, S_n, alpha^0_n, alpha_n, I_n."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    columns = ("$S^c_n$", "$\\alpha^c_n$", "$S_n$", "$\\alpha^0_n$", "$\\alpha_n$", "$I_n$")
    n = len(scene.layers)
    fig, axes = plt.subplots(n, len(columns), figsize=(2 * len(columns), 2 * n), squeeze=False)

    for i, layer in enumerate(scene.layers):
        panels = (layer.surface, layer.matte, stack.surfaces[i],
                  stack.mattes0[i], stack.mattes[i], stack.layer_images[i])
        for j, panel in enumerate(panels):
            ax = axes[i, j]
            if panel.shape[2] == 1:
                ax.imshow(panel[:, :, 0], cmap="gray", vmin=0, vmax=1)
            else:
                ax.imshow(np.clip(panel, 0, 1))
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(columns[j])
        axes[i, 0].set_ylabel(f"n={i + 1} ($\\sigma$={layer.sigma:g})")

    fig.tight_layout()
    fig.savefig(fn, dpi=100)
    plt.close(fig)
