"""Training losses for matte-guided fusion, with analytic gradients.

    Loss       = lambda1 * Loss_matte + lambda2 * Loss_Ini + Loss_W
    Loss_matte = mean |matte_Ini - matte_GT|
    Loss_Ini   = mean (Fusion_Ini - Fusion_GT)^2
    Loss_W     = mean W * (Fusion_Fin - Fusion_GT)^2
    W          = (1 + (k - 1)(1 - |2 matte - 1|)) / k

Every loss function returns (value, gradient w.r.t. its prediction).
"""
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple
import logging

import numpy as np

from .image import as_image, check_same_shape
from .utils import derive_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.2
    lambda2: float = 0.2
    k: float = 5.0
    # "ini" weights with the predicted matte, "gt" with the ground-truth matte
    weight_matte: str = "ini"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.weight_matte not in ("ini", "gt"):
            raise ValueError(f"weight_matte must be 'ini' or 'gt', got {self.weight_matte!r}")


@dataclass
class LossBreakdown:
    matte: float
    ini: float
    weighted: float
    total: float
    grads: Dict[str, np.ndarray] = field(default_factory=dict)

    def __str__(self):
        return (f"Loss_matte = {self.matte:.6g}\n"
                f"Loss_Ini   = {self.ini:.6g}\n"
                f"Loss_W     = {self.weighted:.6g}\n"
                f"Loss       = {self.total:.6g}")


def _pair(pred, gt, names):
    pred = as_image(pred)
    gt = as_image(gt)
    check_same_shape(pred, gt, names=names, channels=True)
    return pred, gt


def _matte(matte, name="matte"):
    matte = as_image(matte)
    if matte.shape[2] != 1:
        raise ValueError(f"{name} must be single-channel")
    return matte


def loss_matte(matte_pred, matte_gt) -> Tuple[float, np.ndarray]:
    """L1 matte loss; the subgradient at zero residual is 0."""
    pred, gt = _pair(_matte(matte_pred), _matte(matte_gt), ("matte_pred", "matte_gt"))
    diff = pred - gt
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def loss_ini(fusion_ini, fusion_gt) -> Tuple[float, np.ndarray]:
    """L2 loss of the initial fusion."""
    pred, gt = _pair(fusion_ini, fusion_gt, ("fusion_ini", "fusion_gt"))
    diff = pred - gt
    return float(np.mean(diff ** 2)), 2 * diff / diff.size


def weight_map(matte, k: float = 5.0) -> np.ndarray:
    """Boundary weight: 1 where matte = 0.5, 1/k where matte is 0 or 1."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    matte = _matte(matte)
    if matte.min() < 0 or matte.max() > 1:
        raise ValueError("matte values outside [0, 1]")
    return (1 + (k - 1) * (1 - np.abs(2 * matte - 1))) / k


def weight_map_grad(matte, k: float = 5.0) -> np.ndarray:
    """dW/dmatte, with 0 at matte = 0.5."""
    matte = _matte(matte)
    return -2 * (k - 1) / k * np.sign(2 * matte - 1)


def loss_weighted(fusion_fin, fusion_gt, weights) -> Tuple[float, np.ndarray]:
    """Mean of the per-pixel weighted squared error. The single-channel
    weight map is broadcast over the colour channels."""
    pred, gt = _pair(fusion_fin, fusion_gt, ("fusion_fin", "fusion_gt"))
    weights = _matte(weights, "W")
    check_same_shape(pred, weights, names=("fusion_fin", "W"))
    diff = pred - gt
    return float(np.mean(weights * diff ** 2)), 2 * weights * diff / diff.size


def loss_total(matte_ini, matte_gt, fusion_ini, fusion_fin, fusion_gt,
               cfg: Optional[LossConfig] = None) -> LossBreakdown:
    """Combined loss with gradients w.r.t. matte_ini, fusion_ini and fusion_fin.

    When the weight map comes from matte_ini its dependence on the matte is
    part of the matte_ini gradient.
    """
    cfg = cfg or LossConfig()
    l_matte, g_matte = loss_matte(matte_ini, matte_gt)
    l_ini, g_ini = loss_ini(fusion_ini, fusion_gt)

    weight_source = as_image(matte_ini) if cfg.weight_matte == "ini" else as_image(matte_gt)
    weights = weight_map(weight_source, cfg.k)
    l_w, g_fin = loss_weighted(fusion_fin, fusion_gt, weights)

    grad_matte = cfg.lambda1 * g_matte
    if cfg.weight_matte == "ini":
        diff2 = (as_image(fusion_fin) - as_image(fusion_gt)) ** 2
        d_loss_d_w = diff2.sum(axis=2, keepdims=True) / diff2.size
        grad_matte = grad_matte + d_loss_d_w * weight_map_grad(weight_source, cfg.k)

    total = cfg.lambda1 * l_matte + cfg.lambda2 * l_ini + l_w
    return LossBreakdown(
        matte=l_matte,
        ini=l_ini,
        weighted=l_w,
        total=total,
        grads={
            "matte_ini": grad_matte,
            "fusion_ini": cfg.lambda2 * g_ini,
            "fusion_fin": g_fin,
        },
    )


def relative_error(analytic: np.ndarray, numeric: np.ndarray, mask=None) -> float:
    """max |a - n| / max(|a|, |n|, 1e-3 max|n|) over the masked entries."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if mask is not None:
        analytic = analytic[mask]
        numeric = numeric[mask]
    if analytic.size == 0:
        return 0.0
    floor = max(1e-3 * float(np.max(np.abs(numeric))), np.finfo(float).tiny)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def numeric_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite differences of the scalar function f at x."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return grad


@dataclass
class GradCheckResult:
    breakdown: LossBreakdown
    errors: Dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.errors.values())

    def __str__(self):
        lines = [str(self.breakdown), "", "Max relative gradient error (central differences)"]
        for name, err in self.errors.items():
            lines.append(f"  d/d{name:<11} {err:.3e}")
        return "\n".join(lines)


# pixels closer than this to a kink of |.| are left out of the gradient check
KINK_MARGIN = 1e-2


def random_loss_inputs(size: int = 6, seed: int = 0, channels: int = 3):
    """Random matte and fusion images for a gradient check."""
    rng = derive_rng(seed, "grad-check")
    shape = (size, size, 1)
    # mattes stay clear of 0 and 1 so that perturbed values remain valid
    return {
        "matte_ini": rng.uniform(0.05, 0.95, shape),
        "matte_gt": rng.uniform(0.05, 0.95, shape),
        "fusion_ini": rng.uniform(0, 1, (size, size, channels)),
        "fusion_fin": rng.uniform(0, 1, (size, size, channels)),
        "fusion_gt": rng.uniform(0, 1, (size, size, channels)),
    }


def grad_check(size: int = 6, seed: int = 0, cfg: Optional[LossConfig] = None,
               h: float = 1e-4, inputs: Optional[dict] = None) -> GradCheckResult:
    """Compare the analytic gradients of `loss_total` with central differences.

    The matte gradient is only compared where the L1 residual and the
    distance of matte_ini to 0.5 both exceed KINK_MARGIN.
    """
    cfg = cfg or LossConfig()
    if inputs is None:
        inputs = random_loss_inputs(size, seed)
    inputs = {k: as_image(v, copy=True) for k, v in inputs.items()}
    breakdown = loss_total(cfg=cfg, **inputs)

    errors = {}
    for name in ("matte_ini", "fusion_ini", "fusion_fin"):
        x = inputs[name]

        def f(value, name=name):
            return loss_total(cfg=cfg, **{**inputs, name: value}).total

        numeric = numeric_grad(f, x, h=h)
        mask = None
        if name == "matte_ini":
            mask = np.abs(x - inputs["matte_gt"]) > KINK_MARGIN
            if cfg.weight_matte == "ini":
                mask &= np.abs(x - 0.5) > KINK_MARGIN
        errors[name] = relative_error(breakdown.grads[name], numeric, mask)
        logger.debug("Gradient check %s: %.3e", name, errors[name])
    return GradCheckResult(breakdown=breakdown, errors=errors)
