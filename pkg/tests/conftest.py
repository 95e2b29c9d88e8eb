import numpy as np
import pytest
import yaml
from scipy import signal

from mftools.image import GaussianKernel, gaussian_blur, save_png
from mftools.utils import derive_rng


def make_texture(size=64, seed=0, channels=3, sigma=1.0):
    """Band-limited random texture in [0.1, 0.9]."""
    rng = derive_rng(seed, "texture")
    noise = rng.uniform(0, 1, (size, size, channels))
    tex = gaussian_blur(noise, sigma)
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    return 0.1 + 0.8 * tex


def reference_blur(img, sigma):
    """Full 2-D correlation of the reflect-101 padded image."""
    k = GaussianKernel.from_sigma(sigma)
    r = k.radius
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="reflect")
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = signal.correlate2d(padded[:, :, c], k.dense(), mode="valid")
    return out


def disc_matte(size=64, radius=None, center=None):
    radius = size / 3 if radius is None else radius
    cy, cx = center or (size / 2 - 0.5, size / 2 - 0.5)
    y, x = np.mgrid[0:size, 0:size]
    return ((y - cy) ** 2 + (x - cx) ** 2 <= radius ** 2).astype(np.float64)[:, :, np.newaxis]


@pytest.fixture
def texture():
    return make_texture


@pytest.fixture
def dense_blur():
    return reference_blur


@pytest.fixture
def rng():
    return derive_rng(1234, "tests")


@pytest.fixture
def desk_catalog(tmp_path):
    """Three foregrounds, two backgrounds, 80 x 72 pixel assets, 64 pixel pairs."""
    assets = tmp_path / "assets"
    fgs = []
    for i in range(3):
        color = make_texture(80, seed=10 + i)[:72]
        matte = disc_matte(80, radius=20 + 4 * i)[:72]
        save_png(color, assets / f"fg{i}.png", bit_depth=16)
        save_png(matte, assets / f"fg{i}_matte.png", bit_depth=8)
        fgs.append({"image": f"assets/fg{i}.png", "matte": f"assets/fg{i}_matte.png"})
    for j in range(2):
        save_png(make_texture(80, seed=20 + j), assets / "bg" / f"bg{j}.png", bit_depth=16)

    doc = {
        "foregrounds": fgs,
        "backgrounds": ["assets/bg"],
        "out_size": 64,
        "backgrounds_per_fg": 2,
        "sigma_range": [1.0, 3.0],
    }
    fn = tmp_path / "catalog.yaml"
    fn.write_text(yaml.safe_dump(doc, sort_keys=False))
    return fn
