"""File formats: the UDCT binary tensor container, the dataset directory
layout, checkpoint directories, tone-mapped PNG previews, and the flat
``section.key = value`` run configuration.

UDCT layout (little-endian throughout):

    bytes 0-3   magic "UDCT"
    byte  4     version, currently 1
    byte  5     dtype: 0 = float32, 1 = float64
    byte  6     ndim: 1..4
    byte  7     reserved, 0
    then  ndim u64 extents, then the row-major payload.

Round trips are bitwise exact; every parse failure names the byte offset.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .degrade import DegradationConfig, HdrPair, Psf, tone_map
from .errors import ConfigError, DataError, UdctFormatError
from .model import ModelConfig, ModelParams
from .tensor import Tensor

UDCT_MAGIC = b"UDCT"
UDCT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {"f32": 0, "f64": 1}


def write_udct(path, tensor: Tensor, dtype: str = "f64") -> None:
    """Write a tensor. f32 storage is meant for compact checkpoints only;
    everything else stays f64."""
    if dtype not in _DTYPE_CODES:
        raise DataError(f"unsupported dtype '{dtype}' (use f32 or f64)")
    code = _DTYPE_CODES[dtype]
    data = tensor.data
    if data.ndim < 1 or data.ndim > 4:
        raise DataError(f"UDCT stores 1-4 dimensional tensors, got shape {data.shape}")
    header = UDCT_MAGIC + struct.pack("<BBBB", UDCT_VERSION, code, data.ndim, 0)
    dims = struct.pack(f"<{data.ndim}Q", *data.shape)
    payload = np.ascontiguousarray(data, dtype=_DTYPES[code]).tobytes()
    Path(path).write_bytes(header + dims + payload)


def read_udct(path) -> Tensor:
    """Read a tensor back (always as f64; f32 payloads upcast exactly)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise UdctFormatError("file truncated inside magic", offset=len(raw))
    if raw[:4] != UDCT_MAGIC:
        raise UdctFormatError(f"bad magic {raw[:4]!r}", offset=0)
    if len(raw) < 8:
        raise UdctFormatError("file truncated inside fixed header", offset=len(raw))
    version, code, ndim, reserved = struct.unpack("<BBBB", raw[4:8])
    if version != UDCT_VERSION:
        raise UdctFormatError(f"unsupported version {version}", offset=4)
    if code not in _DTYPES:
        raise UdctFormatError(f"unsupported dtype code {code}", offset=5)
    if not 1 <= ndim <= 4:
        raise UdctFormatError(f"ndim must be 1..4, got {ndim}", offset=6)
    if reserved != 0:
        raise UdctFormatError(f"reserved byte must be 0, got {reserved}", offset=7)
    dims_end = 8 + 8 * ndim
    if len(raw) < dims_end:
        raise UdctFormatError("file truncated inside dims", offset=len(raw))
    shape = struct.unpack(f"<{ndim}Q", raw[8:dims_end])
    expected = int(np.prod(shape)) * _DTYPES[code].itemsize
    if len(raw) - dims_end != expected:
        raise UdctFormatError(
            f"payload size mismatch: expected {expected} bytes, got {len(raw) - dims_end}",
            offset=min(len(raw), dims_end + expected))
    values = np.frombuffer(raw, dtype=_DTYPES[code], offset=dims_end).reshape(shape)
    return Tensor(values.astype(np.float64))


# ---------------------------------------------------------------------------
# dataset directory layout

def pair_name(index: int) -> str:
    return f"{index:04d}"


def save_dataset(root, pairs, psf: Psf, meta: dict) -> None:
    root = Path(root)
    (root / "clean").mkdir(parents=True, exist_ok=True)
    (root / "degraded").mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(pairs):
        name = pair_name(i) + ".udct"
        write_udct(root / "clean" / name, pair.clean)
        write_udct(root / "degraded" / name, pair.degraded)
    write_udct(root / "psf.udct", Tensor(psf.kernel))
    write_flat_config(root / "meta.txt", meta)


def load_dataset(root):
    """Returns (pairs, psf, meta). Validates the layout: identical clean and
    degraded name sets and a psf.udct at the root."""
    root = Path(root)
    clean_dir, deg_dir = root / "clean", root / "degraded"
    if not clean_dir.is_dir() or not deg_dir.is_dir():
        raise DataError(f"dataset at {root} needs clean/ and degraded/ directories")
    psf_path = root / "psf.udct"
    if not psf_path.exists():
        raise DataError(f"dataset at {root} is missing psf.udct")
    clean_names = sorted(p.name for p in clean_dir.glob("*.udct"))
    deg_names = sorted(p.name for p in deg_dir.glob("*.udct"))
    if clean_names != deg_names:
        raise DataError(f"clean/degraded name sets differ in {root}")
    if not clean_names:
        raise DataError(f"dataset at {root} is empty")
    psf = Psf(read_udct(psf_path).data)
    meta = read_flat_config(root / "meta.txt") if (root / "meta.txt").exists() else {}
    pairs = []
    for name in clean_names:
        pairs.append(HdrPair(clean=read_udct(clean_dir / name),
                             degraded=read_udct(deg_dir / name),
                             psf_id="psf"))
    return pairs, psf, meta


# ---------------------------------------------------------------------------
# checkpoints: one UDCT file per parameter plus a manifest

def write_checkpoint(ckpt_dir, params: ModelParams, cfg: ModelConfig,
                     iteration: int, is_ema: bool,
                     values: dict | None = None) -> None:
    """Save parameters (or the EMA shadow passed via ``values``) with a
    manifest carrying the model config, the iteration, and the EMA flag."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "model.channels": cfg.channels,
        "model.blocks": ",".join(str(b) for b in cfg.blocks),
        "model.kernel_code_dim": cfg.kernel_code_dim,
        "model.dyn_kernel": cfg.dyn_kernel,
        "model.leaky_slope": cfg.leaky_slope,
        "model.input_scale": cfg.input_scale,
        "model.use_skip": cfg.use_skip,
        "model.use_condition_branch": cfg.use_condition_branch,
        "model.use_kernel_branch": cfg.use_kernel_branch,
        "model.global_residual": cfg.global_residual,
        "state.iteration": iteration,
        "state.ema": is_ema,
    }
    write_flat_config(ckpt_dir / "manifest.txt", manifest)
    for path, tensor in params.items():
        arr = values[path] if values is not None else tensor.data
        write_udct(ckpt_dir / (path + ".udct"), Tensor(arr))


def model_config_from_manifest(manifest: dict) -> ModelConfig:
    def get(key, conv, default):
        return conv(manifest[key]) if key in manifest else default

    as_bool = lambda v: str(v).lower() in ("true", "1", "yes")
    return ModelConfig(
        channels=get("model.channels", int, 32),
        blocks=tuple(int(b) for b in str(manifest.get("model.blocks", "2,2,2,8,2,2,2")).split(",")),
        kernel_code_dim=get("model.kernel_code_dim", int, 5),
        dyn_kernel=get("model.dyn_kernel", int, 3),
        leaky_slope=get("model.leaky_slope", float, 0.2),
        input_scale=get("model.input_scale", float, 500.0),
        use_skip=get("model.use_skip", as_bool, True),
        use_condition_branch=get("model.use_condition_branch", as_bool, True),
        use_kernel_branch=get("model.use_kernel_branch", as_bool, True),
        global_residual=get("model.global_residual", as_bool, True),
    )


def read_checkpoint(ckpt_dir):
    """Returns (params, model_cfg, manifest)."""
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.txt"
    if not manifest_path.exists():
        raise DataError(f"no manifest.txt in checkpoint {ckpt_dir}")
    manifest = read_flat_config(manifest_path)
    cfg = model_config_from_manifest(manifest)
    tensors = {}
    for f in sorted(ckpt_dir.glob("*.udct")):
        t = read_udct(f)
        t.requires_grad = True
        tensors[f.name[:-len(".udct")]] = t
    if not tensors:
        raise DataError(f"checkpoint {ckpt_dir} holds no parameter files")
    return ModelParams(tensors), cfg, manifest


# ---------------------------------------------------------------------------
# previews

def export_preview(tensor: Tensor, path) -> None:
    """8-bit PNG of a (1,3,H,W) radiance image: round(Map(I)*255)."""
    if tensor.data.ndim != 4 or tensor.shape[0] != 1 or tensor.shape[1] != 3:
        raise DataError(f"preview needs a (1,3,H,W) tensor, got {tensor.shape}")
    mapped = tone_map(tensor).data[0]
    pixels = np.clip(np.rint(mapped * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# flat "section.key = value" files (run config, dataset meta, manifests)

def write_flat_config(path, values: dict) -> None:
    lines = [f"{k} = {_fmt(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def read_flat_config(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=lineno)
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple:
    s = s.strip()
    if not s:
        return ()
    return tuple(int(x.strip()) for x in s.split(","))


def parse_config(path):
    """Parse a run configuration into (ModelConfig, TrainConfig,
    DegradationConfig). Unknown keys, type errors, and invariant violations
    are reported with their line number."""
    from .trainer import TrainConfig  # local import avoids a module cycle
    from .objective import LossKind

    schema = {
        "model.channels": int,
        "model.blocks": _parse_int_list,
        "model.kernel_code_dim": int,
        "model.dyn_kernel": int,
        "model.leaky_slope": float,
        "model.input_scale": float,
        "model.use_skip": _parse_bool,
        "model.use_condition_branch": _parse_bool,
        "model.use_kernel_branch": _parse_bool,
        "model.global_residual": _parse_bool,
        "train.lr_max": float,
        "train.lr_min": float,
        "train.restart_iters": _parse_int_list,
        "train.total_iters": int,
        "train.batch_size": int,
        "train.patch": int,
        "train.ema_decay": float,
        "train.loss": lambda s: LossKind(s.lower()),
        "train.seed": int,
        "train.log_interval": int,
        "degrade.noise_sigma": float,
        "degrade.saturation_level": float,
        "degrade.apply_tonemap_to_input": _parse_bool,
    }
    positive = {"model.channels", "model.kernel_code_dim", "model.dyn_kernel", "model.input_scale",
                "train.lr_max", "train.lr_min", "train.total_iters",
                "train.batch_size", "train.patch", "train.log_interval",
                "degrade.saturation_level"}

    parsed: dict = {}
    lines: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=lineno)
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in schema:
            raise ConfigError(f"unknown key '{key}'", line=lineno)
        try:
            value = schema[key](val)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for '{key}': {e}", line=lineno) from None
        if key in positive and isinstance(value, (int, float)) and value <= 0:
            raise ConfigError(f"'{key}' must be positive, got {value}", line=lineno)
        parsed[key] = value
        lines[key] = lineno

    def section(prefix):
        return {k.split(".", 1)[1]: v for k, v in parsed.items() if k.startswith(prefix + ".")}

    try:
        model_cfg = ModelConfig(**section("model"))
        train_cfg = TrainConfig(**section("train"))
        degrade_cfg = DegradationConfig(**section("degrade"))
    except (ValueError, DataError) as e:
        raise ConfigError(str(e)) from None
    return model_cfg, train_cfg, degrade_cfg
