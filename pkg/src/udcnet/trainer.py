"""Optimisation loop: Adam with a cosine-annealed, warm-restarted learning
rate, an EMA shadow of the weights, aligned random patch sampling, CSV
logging, and checkpoint/evaluation plumbing.

Desk-scale defaults (5e3 iterations, batch 4, 64px patches) replace the
full-scale recipe; the full-scale values remain reachable through the
config. Restart boundaries default to the full-scale schedule rescaled
proportionally to ``total_iters``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data_io
from .errors import DataError, NumericError
from .model import ModelConfig, ModelParams, init_params, model_forward
from .objective import LossKind, compute_loss, psnr_tonemapped, ssim_tonemapped
from .tensor import Tape, Tensor, backward

_FULL_SCALE_RESTARTS = (50_000, 150_000, 300_000, 450_000)
_FULL_SCALE_TOTAL = 600_000


def scaled_restarts(total_iters: int) -> tuple:
    """Full-scale restart boundaries rescaled to a shorter run."""
    pts = []
    for r in _FULL_SCALE_RESTARTS:
        p = round(r * total_iters / _FULL_SCALE_TOTAL)
        if 0 < p < total_iters and (not pts or p > pts[-1]):
            pts.append(p)
    return tuple(pts)


@dataclass
class TrainConfig:
    lr_max: float = 2e-4
    lr_min: float = 1e-7
    restart_iters: tuple | None = None  # None -> proportional defaults
    total_iters: int = 5000
    batch_size: int = 4
    patch: int = 64
    ema_decay: float = 0.999
    loss: LossKind = LossKind.MAPPING_L1
    seed: int = 0
    log_interval: int = 50

    def __post_init__(self):
        if self.restart_iters is None:
            self.restart_iters = scaled_restarts(self.total_iters)
        self.restart_iters = tuple(int(r) for r in self.restart_iters)
        if not (0 < self.lr_min < self.lr_max):
            raise ValueError(f"need 0 < lr_min < lr_max, got {self.lr_min}, {self.lr_max}")
        if self.total_iters < 1:
            raise ValueError(f"total_iters must be >= 1, got {self.total_iters}")
        if any(b <= a for a, b in zip(self.restart_iters, self.restart_iters[1:])):
            raise ValueError(f"restart_iters must be strictly ascending, got {self.restart_iters}")
        if self.restart_iters and not (0 < self.restart_iters[0]
                                       and self.restart_iters[-1] < self.total_iters):
            raise ValueError(f"restart_iters must lie inside (0, total_iters), got {self.restart_iters}")
        if self.patch < 8 or self.patch % 8:
            raise ValueError(f"patch must be a positive multiple of 8, got {self.patch}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.ema_decay <= 1.0):
            raise ValueError(f"ema_decay must be in [0,1], got {self.ema_decay}")
        if self.log_interval < 1:
            raise ValueError(f"log_interval must be >= 1, got {self.log_interval}")
        if isinstance(self.loss, str):
            self.loss = LossKind(self.loss)


@dataclass
class TrainState:
    iteration: int
    m: dict
    v: dict
    ema: dict
    rng: np.random.Generator

    @classmethod
    def initial(cls, params: ModelParams, seed: int) -> "TrainState":
        m = {p: np.zeros_like(t.data) for p, t in params.items()}
        v = {p: np.zeros_like(t.data) for p, t in params.items()}
        ema = {p: t.data.copy() for p, t in params.items()}
        return cls(iteration=0, m=m, v=v, ema=ema, rng=np.random.default_rng(seed))


def lr_schedule(iteration: int, cfg: TrainConfig) -> float:
    """Cosine annealing from lr_max to lr_min inside each segment between
    warm restarts; the rate is lr_max at 0 and at every restart boundary."""
    if not 0 <= iteration < cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters})")
    bounds = (0, *cfg.restart_iters, cfg.total_iters)
    for t0, t1 in zip(bounds, bounds[1:]):
        if t0 <= iteration < t1:
            phase = (iteration - t0) / (t1 - t0)
            return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * phase))
    raise AssertionError("unreachable")


def adam_step(params: ModelParams, grads: dict, state: TrainState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Standard bias-corrected Adam update, in place. A missing gradient
    counts as zero; a non-finite one aborts the step naming the parameter."""
    state.iteration += 1
    t = state.iteration
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for path, p in params.items():
        g = grads.get(path)
        if g is None:
            g = 0.0
        elif not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter '{path}'")
        m = state.m[path]
        v = state.v[path]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def ema_update(shadow: dict, params: ModelParams, decay: float) -> None:
    """shadow <- decay*shadow + (1-decay)*params, elementwise."""
    for path, p in params.items():
        s = shadow[path]
        if s.shape != p.data.shape:
            raise ValueError(f"EMA shape mismatch for '{path}': {s.shape} vs {p.data.shape}")
        s *= decay
        s += (1.0 - decay) * p.data


def sample_crop(pair, patch: int, rng: np.random.Generator):
    """One aligned (clean, degraded) crop; offsets are shared so the pair
    stays pixel-registered."""
    H, W = pair.clean.shape[2], pair.clean.shape[3]
    if patch > H or patch > W:
        raise DataError(f"patch {patch} exceeds image extents {H}x{W}")
    top = int(rng.integers(0, H - patch + 1))
    left = int(rng.integers(0, W - patch + 1))
    sl = (0, slice(None), slice(top, top + patch), slice(left, left + patch))
    return pair.clean.data[sl], pair.degraded.data[sl]


def _sample_batch(pairs, patch: int, batch: int, rng: np.random.Generator):
    cleans, degs = [], []
    for _ in range(batch):
        pair = pairs[int(rng.integers(0, len(pairs)))]
        c, d = sample_crop(pair, patch, rng)
        cleans.append(c)
        degs.append(d)
    return np.stack(cleans), np.stack(degs)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, data_dir, out_dir):
    """Train on a dataset directory; writes checkpoint/ (raw),
    checkpoint_ema/, and train_log.csv under ``out_dir``. Returns a summary
    dict. Fully deterministic for a fixed seed."""
    pairs, psf, _meta = data_io.load_dataset(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    params = init_params(model_cfg, train_cfg.seed)
    state = TrainState.initial(params, train_cfg.seed)
    log_rows = []
    last_loss = None

    for it in range(train_cfg.total_iters):
        lr = lr_schedule(it, train_cfg)
        clean_np, deg_np = _sample_batch(pairs, train_cfg.patch, train_cfg.batch_size, state.rng)
        tape = Tape()
        pred = model_forward(Tensor(deg_np), psf, params, model_cfg, tape)
        loss = compute_loss(train_cfg.loss, pred, Tensor(clean_np), tape)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise NumericError(f"non-finite loss {loss_val} at iteration {it}")
        params.zero_grad()
        backward(loss, tape)
        grads = {path: t.grad for path, t in params.items()}
        adam_step(params, grads, state, lr)
        ema_update(state.ema, params, train_cfg.ema_decay)
        last_loss = loss_val
        if it % train_cfg.log_interval == 0 or it == train_cfg.total_iters - 1:
            log_rows.append((it, lr, loss_val))

    log_path = out_dir / "train_log.csv"
    with open(log_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iter", "lr", "loss"])
        writer.writerows(log_rows)

    raw_dir = out_dir / "checkpoint"
    ema_dir = out_dir / "checkpoint_ema"
    data_io.write_checkpoint(raw_dir, params, model_cfg, train_cfg.total_iters, is_ema=False)
    data_io.write_checkpoint(ema_dir, params, model_cfg, train_cfg.total_iters, is_ema=True,
                             values=state.ema)
    return {
        "final_loss": last_loss,
        "log_path": str(log_path),
        "checkpoint": str(raw_dir),
        "checkpoint_ema": str(ema_dir),
    }


def _resolve_checkpoint(ckpt, use_ema: bool) -> Path:
    """Accept either a training output dir or a concrete checkpoint dir."""
    ckpt = Path(ckpt)
    sub = ckpt / ("checkpoint_ema" if use_ema else "checkpoint")
    if (sub / "manifest.txt").exists():
        return sub
    if (ckpt / "manifest.txt").exists():
        return ckpt
    raise DataError(f"no checkpoint manifest under {ckpt}")


def evaluate(ckpt, data_dir, use_ema: bool = True, report_path=None,
             previews_dir=None):
    """Tone-mapped PSNR/SSIM per image plus the mean, optionally written as
    CSV (rows: name,psnr,ssim; one per image, then 'mean')."""
    params, model_cfg, _manifest = data_io.read_checkpoint(_resolve_checkpoint(ckpt, use_ema))
    pairs, psf, meta = data_io.load_dataset(data_dir)
    saturation = float(meta.get("degrade.saturation_level", 500.0))

    rows = []
    for i, pair in enumerate(pairs):
        pred = model_forward(pair.degraded, psf, params, model_cfg, tape=None)
        restored = Tensor(np.clip(pred.data, 0.0, saturation))
        rows.append((data_io.pair_name(i),
                     psnr_tonemapped(restored, pair.clean),
                     ssim_tonemapped(restored, pair.clean)))
        if previews_dir is not None:
            Path(previews_dir).mkdir(parents=True, exist_ok=True)
            data_io.export_preview(restored, Path(previews_dir) / f"{data_io.pair_name(i)}.png")

    mean_psnr = float(np.mean([r[1] for r in rows]))
    mean_ssim = float(np.mean([r[2] for r in rows]))
    rows.append(("mean", mean_psnr, mean_ssim))

    if report_path is not None:
        with open(report_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["name", "psnr", "ssim"])
            for name, p, s in rows:
                writer.writerow([name, f"{p:.6f}", f"{s:.8f}"])
    return rows
