"""U-shape restoration network with spatially-variant modulation and
PSF-conditioned per-pixel dynamic filtering.

Three parts share one explicit tape:

* base network: encoder (3 scales) + bottleneck + decoder built from
  residual blocks (modulation at block entry, two 3x3 convs, residual add),
  with skip connections realised as concat + 1x1 fuse.
* condition branch: derives per-scale (alpha, beta) modulation maps from
  the degraded image; alpha heads emit 1 + raw so zero-initialised heads
  start as the identity.
* kernel branch: projects the PSF to a short code, stretches it across the
  image, and emits per-scale, per-pixel depthwise k x k filters; heads emit
  raw + delta so they also start as the identity.

Channel widths double per scale (capped at x8). After each scale's block
stack the features pass through the dynamic convolution for that scale.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.fft

from .degrade import Psf
from .errors import NumericError
from .tensor import (Tape, Tensor, add, concat_channels, conv2d, leaky_relu,
                     mul, upsample2x_conv)
from . import kernels

N_SCALES = 4


@dataclass
class ModelConfig:
    channels: int = 32
    blocks: tuple = (2, 2, 2, 8, 2, 2, 2)
    kernel_code_dim: int = 5
    dyn_kernel: int = 3
    leaky_slope: float = 0.2
    in_channels: int = 3
    input_scale: float = 500.0  # radiance units per internal unit (sensor ceiling)
    use_skip: bool = True
    use_condition_branch: bool = True
    use_kernel_branch: bool = True
    global_residual: bool = True

    def __post_init__(self):
        if self.input_scale <= 0:
            raise ValueError(f"input_scale must be positive, got {self.input_scale}")
        self.blocks = tuple(int(b) for b in self.blocks)
        if len(self.blocks) != 7 or any(b < 1 for b in self.blocks):
            raise ValueError(f"blocks must be 7 entries >= 1, got {self.blocks}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.dyn_kernel < 1 or self.dyn_kernel % 2 == 0:
            raise ValueError(f"dyn_kernel must be odd, got {self.dyn_kernel}")
        if self.kernel_code_dim < 1:
            raise ValueError(f"kernel_code_dim must be >= 1, got {self.kernel_code_dim}")

    def scale_channels(self, scale: int) -> int:
        return self.channels * min(2 ** scale, 8)

    def with_flags(self, **flags) -> "ModelConfig":
        return replace(self, **flags)


class ModelParams:
    """Named map from parameter path to Tensor; the set is fixed at creation."""

    def __init__(self, tensors: dict):
        self._tensors = dict(tensors)

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._tensors[path]
        except KeyError:
            raise KeyError(f"no parameter at path '{path}'") from None

    def __contains__(self, path: str) -> bool:
        return path in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def paths(self):
        return self._tensors.keys()

    def n_values(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def validate_finite(self) -> None:
        for path, t in self._tensors.items():
            t.validate_finite(path)


# ---------------------------------------------------------------------------
# core ops

def sft_apply(x: Tensor, alpha: Tensor, beta: Tensor, tape: Tape | None = None) -> Tensor:
    """Spatial feature transform: alpha (.) x + beta, all same shape."""
    if x.shape != alpha.shape or x.shape != beta.shape:
        raise ValueError(f"sft_apply shapes differ: x {x.shape}, alpha {alpha.shape}, beta {beta.shape}")
    return add(mul(alpha, x, tape), beta, tape)


def dynamic_conv(features: Tensor, kernel_feats: Tensor, k: int,
                 tape: Tape | None = None) -> Tensor:
    """Per-pixel depthwise k x k filtering. ``kernel_feats`` holds, per pixel
    and per channel c, a flattened k x k filter in channels [c*k^2, (c+1)*k^2);
    features are zero-padded so border pixels see truncated patches."""
    if features.data.ndim != 4 or kernel_feats.data.ndim != 4:
        raise ValueError("dynamic_conv expects 4-D features and kernel features")
    B, C, H, W = features.shape
    if k < 1 or k % 2 == 0:
        raise ValueError(f"dynamic_conv kernel size must be odd, got {k}")
    if kernel_feats.shape[0] != B or kernel_feats.shape[2:] != (H, W):
        raise ValueError(f"kernel feature grid {kernel_feats.shape} does not match features {features.shape}")
    if kernel_feats.shape[1] != C * k * k:
        raise ValueError(f"kernel features have {kernel_feats.shape[1]} channels, "
                         f"need C*k^2 = {C * k * k}")

    out = kernels.dynconv_forward(features.data, kernel_feats.data, k)

    def make_rule(fd=features.data, kd=kernel_feats.data,
                  need_gf=features.requires_grad, need_gk=kernel_feats.requires_grad):
        def rule(g):
            return kernels.dynconv_backward(fd, kd, g, k, need_gf, need_gk)
        return rule

    from .tensor import _finish
    return _finish(out, (features, kernel_feats), make_rule, tape)


def _zigzag_indices(h: int, w: int):
    order = []
    for d in range(h + w - 1):
        if d % 2 == 0:
            rows = range(min(d, h - 1), max(0, d - w + 1) - 1, -1)
        else:
            rows = range(max(0, d - w + 1), min(d, h - 1) + 1)
        order.extend((i, d - i) for i in rows)
    return order


def kernel_code(psf, b: int) -> np.ndarray:
    """Project a PSF onto its first ``b`` orthonormal 2-D DCT coefficients in
    zig-zag order. Accepts a Psf or a raw 2-D array."""
    kern = psf.kernel if isinstance(psf, Psf) else np.asarray(psf, dtype=np.float64)
    if kern.ndim != 2:
        raise ValueError(f"kernel_code expects a 2-D kernel, got shape {kern.shape}")
    if b > kern.size:
        raise ValueError(f"code dim {b} exceeds kernel element count {kern.size}")
    coeffs = scipy.fft.dctn(kern, norm="ortho")
    order = _zigzag_indices(*kern.shape)[:b]
    return np.array([coeffs[i, j] for i, j in order])


# ---------------------------------------------------------------------------
# parameters

def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """He fan-in init for conv weights, zero biases; modulation and filter
    heads start at zero so both branches begin as identities."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}

    def conv_param(path: str, out_c: int, in_c: int, k: int, zero: bool = False):
        if zero:
            w = np.zeros((out_c, in_c, k, k))
        else:
            std = np.sqrt(2.0 / (in_c * k * k))
            w = rng.normal(0.0, std, size=(out_c, in_c, k, k))
        tensors[path + ".weight"] = Tensor(w, requires_grad=True)
        tensors[path + ".bias"] = Tensor(np.zeros(out_c), requires_grad=True)

    ch = [cfg.scale_channels(s) for s in range(N_SCALES)]
    blocks = cfg.blocks

    def res_block(prefix: str, c: int):
        conv_param(prefix + ".conv1", c, c, 3)
        conv_param(prefix + ".conv2", c, c, 3)

    conv_param("base.head", ch[0], cfg.in_channels, 3)
    for s in range(3):
        for i in range(blocks[s]):
            res_block(f"base.enc{s}.block{i}", ch[s])
        conv_param(f"base.down{s}", ch[s + 1], ch[s], 3)
    for i in range(blocks[3]):
        res_block(f"base.mid.block{i}", ch[3])
    for s in (2, 1, 0):
        conv_param(f"base.up{s}", ch[s], ch[s + 1], 3)
        fuse_in = 2 * ch[s] if cfg.use_skip else ch[s]
        conv_param(f"base.fuse{s}", ch[s], fuse_in, 1)
        for i in range(blocks[6 - s]):
            res_block(f"base.dec{s}.block{i}", ch[s])
    # zero-init final conv: with the global residual the net starts at the
    # identity, which He init demonstrably cannot do on 500-range radiance
    conv_param("base.out", cfg.in_channels, ch[0], 3, zero=True)

    if cfg.use_condition_branch:
        for s in range(N_SCALES):
            in_c = cfg.in_channels if s == 0 else ch[s - 1]
            conv_param(f"cond.scale{s}.inp", ch[s], in_c, 3)
            for i in range(2):
                res_block(f"cond.scale{s}.block{i}", ch[s])
            conv_param(f"cond.scale{s}.alpha", ch[s], ch[s], 3, zero=True)
            conv_param(f"cond.scale{s}.beta", ch[s], ch[s], 3, zero=True)

    if cfg.use_kernel_branch:
        k2 = cfg.dyn_kernel ** 2
        for s in range(N_SCALES):
            in_c = cfg.in_channels + cfg.kernel_code_dim if s == 0 else ch[s - 1]
            conv_param(f"kern.scale{s}.inp", ch[s], in_c, 3)
            for i in range(2):
                res_block(f"kern.scale{s}.block{i}", ch[s])
            conv_param(f"kern.scale{s}.head", ch[s] * k2, ch[s], 1, zero=True)

    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# forward passes

def _require_grid(t: Tensor, what: str) -> None:
    if t.data.ndim != 4:
        raise ValueError(f"{what} must be (B,C,H,W), got {t.shape}")
    H, W = t.shape[2], t.shape[3]
    if H % 8 or W % 8:
        raise ValueError(f"{what} extents must be divisible by 8, got {H}x{W}")


def _res_block_fwd(x, params, prefix, slope, tape, ab=None):
    h = sft_apply(x, ab[0], ab[1], tape) if ab is not None else x
    h = conv2d(h, params[prefix + ".conv1.weight"], params[prefix + ".conv1.bias"],
               stride=1, padding=1, tape=tape)
    h = leaky_relu(h, slope, tape)
    h = conv2d(h, params[prefix + ".conv2.weight"], params[prefix + ".conv2.bias"],
               stride=1, padding=1, tape=tape)
    return add(x, h, tape)


def _checked(t: Tensor, path: str) -> Tensor:
    if not np.isfinite(t.data).all():
        raise NumericError(f"non-finite activations after {path}")
    return t


def condition_branch_forward(inp: Tensor, params: ModelParams, cfg: ModelConfig,
                             tape: Tape | None = None):
    """Per-scale (alpha, beta) modulation maps, one pair per scale 0..3."""
    _require_grid(inp, "condition branch input")
    maps = []
    x = inp
    for s in range(N_SCALES):
        stride = 1 if s == 0 else 2
        x = conv2d(x, params[f"cond.scale{s}.inp.weight"], params[f"cond.scale{s}.inp.bias"],
                   stride=stride, padding=1, tape=tape)
        x = leaky_relu(x, cfg.leaky_slope, tape)
        for i in range(2):
            x = _res_block_fwd(x, params, f"cond.scale{s}.block{i}", cfg.leaky_slope, tape)
        raw_a = conv2d(x, params[f"cond.scale{s}.alpha.weight"], params[f"cond.scale{s}.alpha.bias"],
                       stride=1, padding=1, tape=tape)
        alpha = add(raw_a, 1.0, tape)
        beta = conv2d(x, params[f"cond.scale{s}.beta.weight"], params[f"cond.scale{s}.beta.bias"],
                      stride=1, padding=1, tape=tape)
        maps.append((alpha, beta))
        _checked(alpha, f"cond.scale{s}")
    return maps


def _delta_filter_bias(c: int, k: int) -> Tensor:
    """(1, c*k^2, 1, 1) constant putting weight 1 on the patch centre."""
    basis = np.zeros((c, k * k))
    basis[:, (k // 2) * k + k // 2] = 1.0
    return Tensor(basis.reshape(1, c * k * k, 1, 1))


def kernel_branch_forward(inp: Tensor, code: np.ndarray, params: ModelParams,
                          cfg: ModelConfig, tape: Tape | None = None):
    """Per-scale dynamic filter maps (B, C_s*k^2, H_s, W_s). The PSF code is
    stretched across the image and concatenated with it as the conditional
    input; each scale's head emits raw + delta."""
    _require_grid(inp, "kernel branch input")
    code = np.asarray(code, dtype=np.float64).reshape(-1)
    if code.size != cfg.kernel_code_dim:
        raise ValueError(f"code length {code.size} != kernel_code_dim {cfg.kernel_code_dim}")
    B, _, H, W = inp.shape
    k = cfg.dyn_kernel
    code_map = Tensor(np.broadcast_to(code.reshape(1, -1, 1, 1), (B, code.size, H, W)).copy())
    x = concat_channels([code_map, inp], tape)

    feats = []
    for s in range(N_SCALES):
        stride = 1 if s == 0 else 2
        x = conv2d(x, params[f"kern.scale{s}.inp.weight"], params[f"kern.scale{s}.inp.bias"],
                   stride=stride, padding=1, tape=tape)
        x = leaky_relu(x, cfg.leaky_slope, tape)
        for i in range(2):
            x = _res_block_fwd(x, params, f"kern.scale{s}.block{i}", cfg.leaky_slope, tape)
        raw = conv2d(x, params[f"kern.scale{s}.head.weight"], params[f"kern.scale{s}.head.bias"],
                     stride=1, padding=0, tape=tape)
        feats.append(add(raw, _delta_filter_bias(cfg.scale_channels(s), k), tape))
        _checked(raw, f"kern.scale{s}")
    return feats


def model_forward(y_hat: Tensor, psf, params: ModelParams, cfg: ModelConfig,
                  tape: Tape | None = None) -> Tensor:
    """Restore a degraded image. Encoder scales 0-2, bottleneck at scale 3,
    decoder scales 2-0; per-scale modulation maps and dynamic filters are
    shared between the encoder and decoder stacks of the same scale."""
    _require_grid(y_hat, "model input")
    if not np.isfinite(y_hat.data).all():
        raise NumericError("non-finite values in model input")

    # the whole network runs in normalised units (radiance / input_scale);
    # the global residual converts back at the end
    inp = mul(y_hat, 1.0 / cfg.input_scale, tape)

    sft_maps = None
    if cfg.use_condition_branch:
        sft_maps = condition_branch_forward(inp, params, cfg, tape)
    kfeats = None
    if cfg.use_kernel_branch:
        if psf is None:
            raise ValueError("kernel branch enabled but no PSF given")
        code = kernel_code(psf, cfg.kernel_code_dim)
        kfeats = kernel_branch_forward(inp, code, params, cfg, tape)

    slope = cfg.leaky_slope
    blocks = cfg.blocks

    def stack(x, stage, scale, n_blocks):
        ab = sft_maps[scale] if sft_maps is not None else None
        for i in range(n_blocks):
            x = _res_block_fwd(x, params, f"base.{stage}.block{i}", slope, tape, ab)
        if kfeats is not None:
            x = dynamic_conv(x, kfeats[scale], cfg.dyn_kernel, tape)
        return _checked(x, f"base.{stage}")

    x = conv2d(inp, params["base.head.weight"], params["base.head.bias"],
               stride=1, padding=1, tape=tape)
    enc = []
    for s in range(3):
        x = stack(x, f"enc{s}", s, blocks[s])
        enc.append(x)
        x = conv2d(x, params[f"base.down{s}.weight"], params[f"base.down{s}.bias"],
                   stride=2, padding=1, tape=tape)
        x = leaky_relu(x, slope, tape)
    x = stack(x, "mid", 3, blocks[3])
    for s in (2, 1, 0):
        x = upsample2x_conv(x, params[f"base.up{s}.weight"], params[f"base.up{s}.bias"], tape)
        x = leaky_relu(x, slope, tape)
        if cfg.use_skip:
            x = concat_channels([x, enc[s]], tape)
        x = conv2d(x, params[f"base.fuse{s}.weight"], params[f"base.fuse{s}.bias"],
                   stride=1, padding=0, tape=tape)
        x = stack(x, f"dec{s}", s, blocks[6 - s])
    out = conv2d(x, params["base.out.weight"], params["base.out.bias"],
                 stride=1, padding=1, tape=tape)
    if cfg.global_residual:
        out = add(inp, out, tape)
    out = mul(out, cfg.input_scale, tape)
    return _checked(out, "base.out")
