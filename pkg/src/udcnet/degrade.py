"""Image formation for an under-display camera in HDR scenes.

A clean radiance image is blurred by the panel's point spread function,
perturbed by sensor noise, and clipped at the sensor ceiling. Scene values
live in linear radiance units, typically [0, 500]; the compressive tone map
I -> I/(I+0.25) takes them into [0, 1) for losses, metrics and previews.

Also hosts the synthetic PSF and synthetic HDR scene generators used to
build desk-scale datasets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError
from .tensor import Tensor

TONEMAP_KNEE = 0.25
DEFAULT_SATURATION = 500.0


class Psf:
    """Nonnegative 2-D convolution kernel, normalised to unit sum.

    ``raw_energy`` keeps the pre-normalisation sum so a measured kernel's
    absolute transmission is not lost.
    """

    def __init__(self, kernel):
        arr = np.ascontiguousarray(kernel, dtype=np.float64)
        if arr.ndim != 2:
            raise DataError(f"PSF must be 2-D, got shape {arr.shape}")
        kh, kw = arr.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise DataError(f"PSF extents must be odd, got {kh}x{kw}")
        if (arr < 0).any():
            raise DataError("PSF entries must be nonnegative")
        total = float(arr.sum())
        if not np.isfinite(total) or total <= 0:
            raise DataError(f"PSF sum must be positive and finite, got {total}")
        self.kernel = arr / total
        self.raw_energy = total

    @property
    def shape(self) -> tuple:
        return self.kernel.shape

    @property
    def energy(self) -> float:
        """Sum of the (normalised) entries; 1.0 up to rounding."""
        return float(self.kernel.sum())


@dataclass
class DegradationConfig:
    noise_sigma: float = 0.0
    saturation_level: float = DEFAULT_SATURATION
    apply_tonemap_to_input: bool = False

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise DataError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not (0 < self.saturation_level <= 1e6):
            raise DataError(f"saturation_level must be in (0, 1e6], got {self.saturation_level}")


@dataclass
class HdrPair:
    """A (clean, degraded) sample in linear radiance units, both (1,3,H,W)."""

    clean: Tensor
    degraded: Tensor
    psf_id: str = "psf"

    def validate(self) -> None:
        for name, t in (("clean", self.clean), ("degraded", self.degraded)):
            t.validate_finite(name)
            if (t.data < 0).any():
                raise DataError(f"{name} image has negative radiance")


def convolve_psf(image: Tensor, psf: Psf) -> Tensor:
    """True per-channel convolution (kernel flipped) with reflect padding,
    output the same size as the input.

    Reflect padding mirrors about the edge pixel without repeating it,
    so a unit-energy kernel maps constant images to themselves exactly.
    """
    data = image.data
    if data.ndim != 4:
        raise DataError(f"expected (B,C,H,W) image, got shape {image.shape}")
    kh, kw = psf.shape
    H, W = data.shape[2], data.shape[3]
    if kh > H or kw > W:
        raise DataError(f"PSF {kh}x{kw} larger than image {H}x{W}")
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    padded = np.pad(data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode="reflect")
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    flipped = psf.kernel[::-1, ::-1]
    return Tensor(np.tensordot(windows, flipped, axes=([4, 5], [0, 1])))


def clip_sensor(image: Tensor, saturation_level: float) -> Tensor:
    if saturation_level <= 0:
        raise DataError(f"saturation_level must be positive, got {saturation_level}")
    return Tensor(np.clip(image.data, 0.0, saturation_level))


def add_noise(image: Tensor, sigma: float, seed: int) -> Tensor:
    """Additive i.i.d. Gaussian noise; sigma 0 returns the image bit-for-bit."""
    if sigma < 0:
        raise DataError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return Tensor(image.data.copy())
    rng = np.random.default_rng(seed)
    return Tensor(image.data + rng.normal(0.0, sigma, size=image.shape))


def tone_map(image: Tensor) -> Tensor:
    """Compressive map I -> I/(I+0.25): [0, inf) into [0, 1), with 1 -> 0.8."""
    data = image.data
    if (data < 0).any():
        raise DataError("tone_map requires nonnegative radiance")
    return Tensor(data / (data + TONEMAP_KNEE))


def tone_unmap(image: Tensor) -> Tensor:
    """Inverse of tone_map: m -> 0.25*m/(1-m), defined on [0, 1)."""
    data = image.data
    if (data < 0).any() or (data >= 1).any():
        raise DataError("tone_unmap requires values in [0, 1)")
    return Tensor(TONEMAP_KNEE * data / (1.0 - data))


def simulate(x: Tensor, psf: Psf, cfg: DegradationConfig, seed: int) -> HdrPair:
    """Degrade a clean radiance image: blur, noise, sensor clip, optional
    tone mapping of the stored input. Values above the ceiling are legal
    here; the clip stage is exactly what handles them."""
    if (x.data < 0).any():
        raise DataError("clean image must be nonnegative radiance")
    x.validate_finite("clean image")
    blurred = convolve_psf(x, psf)
    noisy = add_noise(blurred, cfg.noise_sigma, seed)
    degraded = clip_sensor(noisy, cfg.saturation_level)
    if cfg.apply_tonemap_to_input:
        degraded = tone_map(degraded)
    return HdrPair(clean=Tensor(x.data.copy()), degraded=degraded)


def psf_synthesize(core_sigma: float, n_sidelobes: int, sidelobe_gain: float,
                   size: int, seed: int) -> Psf:
    """Gaussian core plus axis-aligned secondary lobes, a synthetic stand-in
    for a measured panel PSF with diffraction spikes."""
    if size < 3 or size % 2 == 0:
        raise DataError(f"PSF size must be odd and >= 3, got {size}")
    if n_sidelobes < 0 or sidelobe_gain < 0:
        raise DataError("n_sidelobes and sidelobe_gain must be nonnegative")
    rng = np.random.default_rng(seed)
    half = size // 2
    yy, xx = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    sig = max(core_sigma, 1e-12)
    kernel = np.exp(-(xx ** 2 + yy ** 2) / (2.0 * sig ** 2))

    directions = [(1, 0), (0, 1), (-1, 0), (0, -1)]
    for i in range(n_sidelobes):
        dy, dx = directions[i % 4]
        dist = rng.uniform(max(1.5, size / 8.0), max(2.0, size / 2.0 - 1.0))
        lobe_sigma = max(sig * rng.uniform(0.5, 1.0), 0.5)
        cy, cx = dy * dist, dx * dist
        kernel += sidelobe_gain * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * lobe_sigma ** 2))
    return Psf(kernel)


def _smooth_field(rng: np.random.Generator, h: int, w: int, grid: int = 5) -> np.ndarray:
    """Bilinear upsample of a small uniform[0,1] grid: smooth, stays in [0,1]."""
    g = rng.uniform(0.0, 1.0, size=(3, grid, grid))
    ys = np.linspace(0.0, grid - 1.0, h)
    xs = np.linspace(0.0, grid - 1.0, w)
    y0 = np.minimum(ys.astype(int), grid - 2)
    x0 = np.minimum(xs.astype(int), grid - 2)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    tl = g[:, y0][:, :, x0]
    tr = g[:, y0][:, :, x0 + 1]
    bl = g[:, y0 + 1][:, :, x0]
    br = g[:, y0 + 1][:, :, x0 + 1]
    top = tl * (1 - fx) + tr * fx
    bot = bl * (1 - fx) + br * fx
    return top * (1 - fy) + bot * fy


def scene_synthesize(h: int, w: int, n_lights: int, max_radiance: float,
                     seed: int) -> Tensor:
    """Synthetic HDR scene: smooth base in [0,1] plus bright Gaussian blobs
    peaking in [10, max_radiance], so every lit scene has both unsaturated
    and over-saturated regions."""
    if h < 1 or w < 1:
        raise DataError(f"scene extents must be positive, got {h}x{w}")
    if n_lights > 0 and max_radiance < 10.0:
        raise DataError(f"max_radiance must be >= 10 when lights are present, got {max_radiance}")
    rng = np.random.default_rng(seed)
    scene = _smooth_field(rng, h, w)

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(n_lights):
        # pixel-centred lights so the stated peak is actually reached
        cy = float(rng.integers(0, h))
        cx = float(rng.integers(0, w))
        sigma = rng.uniform(1.5, max(2.0, min(h, w) / 8.0))
        peak = rng.uniform(10.0, max_radiance)
        tint = rng.uniform(0.6, 1.0, size=3)
        tint[rng.integers(0, 3)] = 1.0  # keep the brightest channel at full peak
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
        scene += tint[:, None, None] * peak * blob
    np.clip(scene, 0.0, max_radiance if n_lights else 1.0, out=scene)
    return Tensor(scene[None])
