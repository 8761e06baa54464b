"""Command-line entry point covering the full pipeline: PSF/dataset
synthesis, training, evaluation, inference, previews, and the
finite-difference verification suite.

Exit codes: 0 success, 1 usage, 2 bad or missing data, 3 numeric failure.
Every subcommand taking --seed is reproducible down to identical file
hashes. UDC_THREADS=0 pins the math libraries to one thread (the
deterministic mode used by the tests).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__, data_io, trainer
from .degrade import (DegradationConfig, Psf, psf_synthesize, scene_synthesize,
                      simulate)
from .errors import DataError, NumericError, UdcError
from .gradcheck import (GRAD_TOL_MODEL, GRAD_TOL_OPS, run_model_check,
                        run_op_checks)
from .kernels import backend_name
from .model import model_forward
from .tensor import Tensor


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; usage is 1 here
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _fmt(cls=argparse.ArgumentDefaultsHelpFormatter):
    return cls


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="udcnet", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"udcnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-psf", help="generate a synthetic PSF and save it as UDCT",
                       formatter_class=_fmt())
    p.add_argument("--size", type=int, default=9, help="odd kernel extent")
    p.add_argument("--core-sigma", type=float, default=1.2, help="std of the central lobe")
    p.add_argument("--sidelobes", type=int, default=4, help="number of axis-aligned side lobes")
    p.add_argument("--gain", type=float, default=0.15, help="side lobe amplitude vs core peak")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output .udct path")
    p.set_defaults(func=cmd_synth_psf)

    p = sub.add_parser("synth-data", help="simulate a dataset of (clean, degraded) pairs",
                       formatter_class=_fmt())
    p.add_argument("--count", type=int, default=16, help="number of pairs")
    p.add_argument("--hw", type=int, default=64, help="square image extent (multiple of 8)")
    p.add_argument("--psf", required=True, help="psf .udct file")
    p.add_argument("--noise-sigma", type=float, default=0.0, help="Gaussian noise std, linear units")
    p.add_argument("--lights", type=int, default=3, help="bright blobs per scene")
    p.add_argument("--max-radiance", type=float, default=500.0, help="peak scene radiance")
    p.add_argument("--saturation", type=float, default=500.0, help="sensor clip ceiling")
    p.add_argument("--tonemap-input", action="store_true",
                   help="store tone-mapped degraded images instead of linear")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory (must not be non-empty)")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model on a dataset directory",
                       formatter_class=_fmt())
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset",
                       formatter_class=_fmt())
    p.add_argument("--ckpt", required=True, help="training output or checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ema", action=argparse.BooleanOptionalAction, default=True,
                   help="evaluate the EMA weights")
    p.add_argument("--report", default=None, help="report CSV path (default <ckpt>/eval.csv)")
    p.add_argument("--previews", default=None, help="optional directory for restored previews")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="restore one degraded UDCT image",
                       formatter_class=_fmt())
    p.add_argument("--ckpt", required=True, help="training output or checkpoint directory")
    p.add_argument("--in", dest="input", required=True, help="degraded (1,3,H,W) .udct")
    p.add_argument("--psf", required=True, help="psf .udct file")
    p.add_argument("--ema", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", required=True, help="restored .udct path (preview saved alongside)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all backward rules",
                       formatter_class=_fmt())
    p.add_argument("--scope", choices=("ops", "model", "all"), default="all")
    p.add_argument("--seed", type=int, default=0, help="first seed of the suite")
    p.add_argument("--seeds", type=int, default=20, help="number of seeds")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("preview", help="export a tone-mapped PNG preview of a UDCT image",
                       formatter_class=_fmt())
    p.add_argument("--in", dest="input", required=True, help="(1,3,H,W) .udct file")
    p.add_argument("--out", required=True, help="output .png path")
    p.set_defaults(func=cmd_preview)
    return parser


def cmd_synth_psf(args) -> int:
    psf = psf_synthesize(args.core_sigma, args.sidelobes, args.gain, args.size, args.seed)
    data_io.write_udct(args.out, Tensor(psf.kernel))
    peak = np.unravel_index(np.argmax(psf.kernel), psf.kernel.shape)
    print(f"wrote {args.out}: {psf.kernel.shape[0]}x{psf.kernel.shape[1]}, "
          f"energy {psf.energy:.6f}, peak at {peak}")
    return 0


def cmd_synth_data(args) -> int:
    psf_path = Path(args.psf)
    if not psf_path.exists():
        raise DataError(f"psf file not found: {psf_path}")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise DataError(f"output directory {out} exists and is not empty")
    if args.hw % 8:
        raise DataError(f"--hw must be a multiple of 8, got {args.hw}")
    psf = Psf(data_io.read_udct(psf_path).data)
    cfg = DegradationConfig(noise_sigma=args.noise_sigma,
                            saturation_level=args.saturation,
                            apply_tonemap_to_input=args.tonemap_input)
    pairs = []
    for i in range(args.count):
        sample_seed = args.seed ^ i
        scene = scene_synthesize(args.hw, args.hw, args.lights,
                                 min(args.max_radiance, args.saturation), sample_seed)
        pairs.append(simulate(scene, psf, cfg, sample_seed + 1))
    meta = {
        "degrade.noise_sigma": cfg.noise_sigma,
        "degrade.saturation_level": cfg.saturation_level,
        "degrade.apply_tonemap_to_input": cfg.apply_tonemap_to_input,
        "synth.count": args.count,
        "synth.hw": args.hw,
        "synth.lights": args.lights,
        "synth.max_radiance": args.max_radiance,
        "synth.seed": args.seed,
    }
    data_io.save_dataset(out, pairs, psf, meta)
    print(f"wrote {args.count} pairs of {args.hw}x{args.hw} to {out}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg, _ = data_io.parse_config(args.config)
    print(f"training on {args.data} with backend '{backend_name()}'")
    summary = trainer.train(model_cfg, train_cfg, args.data, args.out)
    print(f"done: final loss {summary['final_loss']:.6g}")
    print(f"checkpoints: {summary['checkpoint']} (raw), {summary['checkpoint_ema']} (ema)")
    print(f"log: {summary['log_path']}")
    return 0


def cmd_eval(args) -> int:
    report = args.report or str(Path(args.ckpt) / ("eval_ema.csv" if args.ema else "eval.csv"))
    rows = trainer.evaluate(args.ckpt, args.data, use_ema=args.ema,
                            report_path=report, previews_dir=args.previews)
    for name, psnr, ssim in rows:
        print(f"{name}: psnr {psnr:.4f} dB, ssim {ssim:.6f}")
    print(f"report: {report}")
    return 0


def cmd_infer(args) -> int:
    image = data_io.read_udct(args.input)
    if image.data.ndim != 4 or image.shape[0] != 1 or image.shape[1] != 3:
        raise DataError(f"expected a (1,3,H,W) image, got {image.shape}")
    if image.shape[2] % 8 or image.shape[3] % 8:
        raise DataError(f"image extents must be divisible by 8, got {image.shape[2]}x{image.shape[3]}")
    psf = Psf(data_io.read_udct(args.psf).data)
    params, model_cfg, _ = data_io.read_checkpoint(
        trainer._resolve_checkpoint(args.ckpt, args.ema))
    pred = model_forward(image, psf, params, model_cfg)
    restored = Tensor(np.clip(pred.data, 0.0, None))
    data_io.write_udct(args.out, restored)
    preview = Path(args.out).with_suffix(".png")
    data_io.export_preview(restored, preview)
    print(f"restored {args.input} -> {args.out} (preview {preview})")
    return 0


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed, args.seed + args.seeds)
    failed = []
    if args.scope in ("ops", "all"):
        results = run_op_checks(seeds)
        for name, err in results.items():
            status = "ok" if err <= GRAD_TOL_OPS else "FAIL"
            print(f"op {name:18s} worst rel err {err:.3e}  {status}")
            if err > GRAD_TOL_OPS:
                failed.append(name)
    if args.scope in ("model", "all"):
        err = run_model_check(seeds)
        status = "ok" if err <= GRAD_TOL_MODEL else "FAIL"
        print(f"model end-to-end      worst rel err {err:.3e}  {status}")
        if err > GRAD_TOL_MODEL:
            failed.append("model")
    if failed:
        raise NumericError(f"gradient check failed for: {', '.join(failed)}")
    print("all gradient checks passed")
    return 0


def cmd_preview(args) -> int:
    data_io.export_preview(data_io.read_udct(args.input), args.out)
    print(f"wrote {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3
    except (DataError, UdcError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
