"""Finite-difference verification of every backward rule, plus an
end-to-end check of the full model graph on a micro configuration.

Relative error uses an absolute floor in the denominator:
err = |a - f| / max(|a|, |f|, 0.01), so near-zero gradient entries stay
meaningful without exploding the quotient. Ops with kinks (leaky_relu, abs,
the tone-map extension) are probed with inputs nudged away from the kink,
since central differences are only valid where the function is smooth.
"""

from __future__ import annotations

import numpy as np

from .model import ModelConfig, dynamic_conv, init_params, model_forward, sft_apply
from .objective import mapping_l1, mapping_l2, plain_l1, tonemap_compress
from .tensor import (Tape, Tensor, abs_val, add, backward, concat_channels,
                     conv2d, finite_diff_grad, leaky_relu, mean_all, mul,
                     square, sub, sum_all, upsample2x_conv)

GRAD_TOL_OPS = 1e-4
GRAD_TOL_MODEL = 1e-3
_FLOOR = 1e-2


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, f = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(f)), _FLOOR)
    return float(np.max(np.abs(a - f) / denom)) if a.size else 0.0


def _check_inputs(build, inputs, eps=1e-5):
    """Backward vs central differences for each input of scalar = build(*inputs)."""
    tape = Tape()
    tracked = [Tensor(t.data, requires_grad=True) for t in inputs]
    loss = build(*tracked, tape)
    backward(loss, tape)
    worst = 0.0
    for i, t in enumerate(tracked):
        def f(probe, i=i):
            args = [Tensor(tt.data) for tt in tracked]
            args[i] = probe
            return build(*args, None)
        fd = finite_diff_grad(f, t, eps=eps)
        worst = max(worst, rel_err(t.grad, fd.data))
    return worst


def _away_from(x, gap):
    """Push values out of (-gap, gap) so kinks never sit inside the FD step."""
    return x + np.sign(x + (x == 0)) * gap


def check_conv2d(rng):
    x = Tensor(rng.normal(size=(1, 3, 7, 8)))
    w = Tensor(rng.normal(size=(4, 3, 3, 3)))
    b = Tensor(rng.normal(size=(4,)))
    worst = _check_inputs(lambda x_, w_, b_, tape: sum_all(
        conv2d(x_, w_, b_, stride=1, padding=1, tape=tape), tape), (x, w, b))
    w5 = Tensor(rng.normal(size=(2, 3, 5, 5)))
    worst = max(worst, _check_inputs(lambda x_, w_, tape: sum_all(
        conv2d(x_, w_, stride=2, padding=2, tape=tape), tape), (x, w5)))
    return worst


def check_upsample2x_conv(rng):
    x = Tensor(rng.normal(size=(1, 2, 4, 5)))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    b = Tensor(rng.normal(size=(3,)))
    return _check_inputs(lambda x_, w_, b_, tape: sum_all(
        upsample2x_conv(x_, w_, b_, tape), tape), (x, w, b))


def check_add(rng):
    a = Tensor(rng.normal(size=(2, 3, 4, 4)))
    b = Tensor(rng.normal(size=(2, 3, 4, 4)))
    worst = _check_inputs(lambda a_, b_, tape: sum_all(add(a_, b_, tape), tape), (a, b))
    c = Tensor(rng.normal(size=(1, 3, 1, 1)))
    worst = max(worst, _check_inputs(lambda a_, c_, tape: sum_all(add(a_, c_, tape), tape), (a, c)))
    return worst


def check_sub(rng):
    a = Tensor(rng.normal(size=(2, 3, 4, 4)))
    b = Tensor(rng.normal(size=(2, 3, 4, 4)))
    return _check_inputs(lambda a_, b_, tape: sum_all(sub(a_, b_, tape), tape), (a, b))


def check_mul(rng):
    a = Tensor(rng.normal(size=(2, 3, 4, 4)))
    b = Tensor(rng.normal(size=(2, 3, 4, 4)))
    worst = _check_inputs(lambda a_, b_, tape: sum_all(mul(a_, b_, tape), tape), (a, b))
    c = Tensor(rng.normal(size=(1, 3, 1, 1)))
    worst = max(worst, _check_inputs(lambda a_, c_, tape: sum_all(mul(a_, c_, tape), tape), (a, c)))
    return worst


def check_leaky_relu(rng):
    x = Tensor(_away_from(rng.normal(size=(1, 4, 6, 6)), 0.05))
    return _check_inputs(lambda x_, tape: sum_all(leaky_relu(x_, 0.2, tape), tape), (x,))


def check_concat_channels(rng):
    a = Tensor(rng.normal(size=(1, 2, 4, 4)))
    b = Tensor(rng.normal(size=(1, 3, 4, 4)))
    return _check_inputs(lambda a_, b_, tape: sum_all(
        concat_channels([a_, b_], tape), tape), (a, b))


def check_abs(rng):
    x = Tensor(_away_from(rng.normal(size=(1, 3, 5, 5)), 0.05))
    return _check_inputs(lambda x_, tape: sum_all(abs_val(x_, tape), tape), (x,))


def check_square(rng):
    x = Tensor(rng.normal(size=(1, 3, 5, 5)))
    return _check_inputs(lambda x_, tape: sum_all(square(x_, tape), tape), (x,))


def check_mean(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    return _check_inputs(lambda x_, tape: mean_all(x_, tape), (x,))


def check_sum(rng):
    x = Tensor(rng.normal(size=(2, 3, 4, 4)))
    return _check_inputs(lambda x_, tape: sum_all(x_, tape), (x,))


def check_sft_apply(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 3)))
    a = Tensor(rng.normal(size=(1, 2, 3, 3)))
    b = Tensor(rng.normal(size=(1, 2, 3, 3)))
    return _check_inputs(lambda x_, a_, b_, tape: sum_all(
        sft_apply(x_, a_, b_, tape), tape), (x, a, b))


def check_dynamic_conv(rng):
    worst = 0.0
    for k in (1, 3):
        f = Tensor(rng.normal(size=(1, 2, 4, 4)))
        kf = Tensor(rng.normal(size=(1, 2 * k * k, 4, 4)))
        worst = max(worst, _check_inputs(lambda f_, k_, tape: sum_all(
            dynamic_conv(f_, k_, k, tape), tape), (f, kf)))
    return worst


def check_tonemap(rng):
    x = Tensor(rng.uniform(0.05, 5.0, size=(1, 3, 4, 4)))
    worst = _check_inputs(lambda x_, tape: sum_all(tonemap_compress(x_, tape), tape), (x,))
    xn = Tensor(_away_from(rng.normal(size=(1, 3, 4, 4)), 0.05))
    worst = max(worst, _check_inputs(lambda x_, tape: sum_all(
        tonemap_compress(x_, tape, extend_negative=True), tape), (xn,)))
    return worst


def _loss_pair(rng, shape=(1, 3, 4, 4)):
    x = rng.uniform(0.2, 5.0, size=shape)
    y = x + np.where(rng.random(shape) < 0.5, -1.0, 1.0) * rng.uniform(0.1, 1.0, size=shape)
    y = np.abs(y) + 0.05  # keep both legs positive and off the |.| kink
    return Tensor(y), Tensor(x)


def check_mapping_l1(rng):
    y, x = _loss_pair(rng)
    return _check_inputs(lambda y_, x_, tape: mapping_l1(y_, x_, tape), (y, x))


def check_mapping_l2(rng):
    y, x = _loss_pair(rng)
    return _check_inputs(lambda y_, x_, tape: mapping_l2(y_, x_, tape), (y, x))


def check_plain_l1(rng):
    y, x = _loss_pair(rng)
    return _check_inputs(lambda y_, x_, tape: plain_l1(y_, x_, tape), (y, x))


OP_CHECKS = {
    "conv2d": check_conv2d,
    "upsample2x_conv": check_upsample2x_conv,
    "add": check_add,
    "sub": check_sub,
    "mul": check_mul,
    "leaky_relu": check_leaky_relu,
    "concat_channels": check_concat_channels,
    "abs": check_abs,
    "square": check_square,
    "sum": check_sum,
    "mean": check_mean,
    "sft_apply": check_sft_apply,
    "dynamic_conv": check_dynamic_conv,
    "tonemap": check_tonemap,
    "mapping_l1": check_mapping_l1,
    "mapping_l2": check_mapping_l2,
    "plain_l1": check_plain_l1,
}


def run_op_checks(seeds=range(20)) -> dict:
    """Worst relative error per registered op across the given seeds."""
    worst = {name: 0.0 for name in OP_CHECKS}
    for seed in seeds:
        for name, fn in OP_CHECKS.items():
            worst[name] = max(worst[name], fn(np.random.default_rng(seed)))
    return worst


MICRO_CFG = ModelConfig(channels=4, blocks=(1, 1, 1, 1, 1, 1, 1))


def run_model_check(seeds=range(20), probes_per_param: int = 2,
                    eps: float = 1e-6) -> float:
    """End-to-end: every parameter of the micro model gets ``probes_per_param``
    randomly-placed finite-difference probes against the taped gradient of
    sum(model_forward(input)). Returns the worst relative error."""
    from .degrade import psf_synthesize

    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        params = init_params(MICRO_CFG, seed)
        for _, p in params.items():
            p.data += rng.normal(0.0, 0.01, size=p.shape)  # de-degenerate zero heads
        psf = psf_synthesize(1.0, 2, 0.2, 5, seed)
        x = Tensor(rng.uniform(0.0, 2.0, size=(1, 3, 16, 16)))

        tape = Tape()
        out = model_forward(x, psf, params, MICRO_CFG, tape)
        loss = sum_all(out, tape)
        backward(loss, tape)

        def loss_at() -> float:
            return sum_all(model_forward(x, psf, params, MICRO_CFG)).item()

        for _path, p in params.items():
            flat = p.data.reshape(-1)
            gflat = p.grad.reshape(-1)
            idxs = rng.integers(0, flat.size, size=min(probes_per_param, flat.size))
            for idx in idxs:
                orig = flat[idx]
                flat[idx] = orig + eps
                fp = loss_at()
                flat[idx] = orig - eps
                fm = loss_at()
                flat[idx] = orig
                fd = (fp - fm) / (2.0 * eps)
                worst = max(worst, rel_err(np.asarray(gflat[idx]), np.asarray(fd)))
    return worst
