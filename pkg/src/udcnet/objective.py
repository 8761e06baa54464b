"""Losses and evaluation metrics, all computed behind the compressive tone
map I -> I/(I+0.25) so bright pixels cannot dominate dark ones.

The mapped L1 loss is the training objective; mapped L2 and plain L1 exist
for the loss ablation. PSNR/SSIM are evaluated on tone-mapped images with
peak 1.0.
"""

from __future__ import annotations

import enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .degrade import TONEMAP_KNEE
from .errors import DataError
from .tensor import Tape, Tensor, _finish, abs_val, mean_all, square, sub

MAPPING_CONSTANT = TONEMAP_KNEE
PSNR_CAP_DB = 120.0
_PSNR_MSE_FLOOR = 1e-12


class LossKind(enum.Enum):
    MAPPING_L1 = "mapping_l1"
    MAPPING_L2 = "mapping_l2"
    PLAIN_L1 = "plain_l1"


def tonemap_compress(x: Tensor, tape: Tape | None = None,
                     extend_negative: bool = False) -> Tensor:
    """Differentiable I/(I+0.25).

    With ``extend_negative`` the map continues below zero as I/0.25, the C1
    linear extension matching the slope at 0. Training uses this so early
    predictions that dip negative get a finite, restoring gradient instead
    of hitting the pole at -0.25; for I >= 0 both forms are identical.
    """
    xd = x.data
    if extend_negative:
        pos = xd >= 0
        out = np.where(pos, xd / (xd + MAPPING_CONSTANT), xd / MAPPING_CONSTANT)

        def make_rule():
            dmap = np.where(pos, MAPPING_CONSTANT / (xd + MAPPING_CONSTANT) ** 2,
                            1.0 / MAPPING_CONSTANT)
            return lambda g: (g * dmap,)
    else:
        if (xd < 0).any():
            raise DataError("tone-mapped loss requires nonnegative inputs "
                            "(use extend_negative for raw network outputs)")
        out = xd / (xd + MAPPING_CONSTANT)

        def make_rule():
            dmap = MAPPING_CONSTANT / (xd + MAPPING_CONSTANT) ** 2
            return lambda g: (g * dmap,)

    return _finish(out, (x,), make_rule, tape)


def _check_pair(y: Tensor, x: Tensor) -> None:
    if y.shape != x.shape:
        raise DataError(f"shape mismatch: {y.shape} vs {x.shape}")


def mapping_l1(y: Tensor, x: Tensor, tape: Tape | None = None,
               extend_negative: bool = False) -> Tensor:
    """Mean |Map(Y) - Map(X)|, the tone-mapping L1 objective."""
    _check_pair(y, x)
    my = tonemap_compress(y, tape, extend_negative)
    mx = tonemap_compress(x, tape, extend_negative)
    return mean_all(abs_val(sub(my, mx, tape), tape), tape)


def mapping_l2(y: Tensor, x: Tensor, tape: Tape | None = None,
               extend_negative: bool = False) -> Tensor:
    """Mean (Map(Y) - Map(X))^2."""
    _check_pair(y, x)
    my = tonemap_compress(y, tape, extend_negative)
    mx = tonemap_compress(x, tape, extend_negative)
    return mean_all(square(sub(my, mx, tape), tape), tape)


def plain_l1(y: Tensor, x: Tensor, tape: Tape | None = None) -> Tensor:
    """Mean |Y - X| in linear radiance, no tone mapping."""
    _check_pair(y, x)
    return mean_all(abs_val(sub(y, x, tape), tape), tape)


def compute_loss(kind: LossKind, y: Tensor, x: Tensor,
                 tape: Tape | None = None) -> Tensor:
    """Training dispatch; mapped losses run with the negative-side extension."""
    if kind is LossKind.MAPPING_L1:
        return mapping_l1(y, x, tape, extend_negative=True)
    if kind is LossKind.MAPPING_L2:
        return mapping_l2(y, x, tape, extend_negative=True)
    if kind is LossKind.PLAIN_L1:
        return plain_l1(y, x, tape)
    raise ValueError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# metrics

def _mapped(t: Tensor) -> np.ndarray:
    if (t.data < 0).any():
        raise DataError("metrics require nonnegative radiance (clamp predictions first)")
    return t.data / (t.data + MAPPING_CONSTANT)


def psnr_tonemapped(y: Tensor, x: Tensor) -> float:
    """10*log10(1/MSE) on tone-mapped images (peak 1.0), capped at 120 dB."""
    _check_pair(y, x)
    mse = float(np.mean((_mapped(y) - _mapped(x)) ** 2))
    if mse < _PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim_tonemapped(y: Tensor, x: Tensor, window: int = 11, sigma: float = 1.5,
                    k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM on tone-mapped images: Gaussian-weighted valid
    windows, L=1, averaged over channels."""
    _check_pair(y, x)
    if y.data.ndim != 4:
        raise DataError(f"SSIM expects (B,C,H,W), got {y.shape}")
    H, W = y.shape[2], y.shape[3]
    if H < window or W < window:
        raise DataError(f"image {H}x{W} smaller than SSIM window {window}")
    my, mx = _mapped(y), _mapped(x)
    win = _gaussian_window(window, sigma)
    c1, c2 = k1 ** 2, k2 ** 2

    def wfilter(img):
        return np.tensordot(sliding_window_view(img, (window, window), axis=(2, 3)),
                            win, axes=([4, 5], [0, 1]))

    mu_y = wfilter(my)
    mu_x = wfilter(mx)
    var_y = wfilter(my * my) - mu_y ** 2
    var_x = wfilter(mx * mx) - mu_x ** 2
    cov = wfilter(my * mx) - mu_y * mu_x
    ssim_map = ((2 * mu_y * mu_x + c1) * (2 * cov + c2) /
                ((mu_y ** 2 + mu_x ** 2 + c1) * (var_y + var_x + c2)))
    return float(ssim_map.mean())
