"""Dense f64 tensor engine with explicit-tape reverse-mode differentiation.

Tensors are NCHW (batch, channel, height, width); scalars and vectors ride
along as degenerate shapes. Every differentiable op takes an optional
``tape``; with a tape it appends one record holding the backward rule, and
``backward(loss, tape)`` replays the records in strict reverse order. There
is no global state: no tape, no graph.

Backward rules must return freshly-owned arrays (never views into another
tensor's adjoint) so the accumulator can add in place.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import NumericError


class Tensor:
    """A numpy array plus gradient metadata.

    ``data`` is always float64 and C-contiguous. ``grad`` is populated by
    ``backward`` and accumulates across calls until ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ValueError(f"tensors are at most 4-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def validate_finite(self, name: str = "tensor") -> None:
        """Raise NumericError if data (or grad, when present) contains NaN/Inf."""
        if not np.isfinite(self.data).all():
            raise NumericError(f"{name}: non-finite values in data")
        if self.grad is not None and not np.isfinite(self.grad).all():
            raise NumericError(f"{name}: non-finite values in grad")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class TapeRecord:
    __slots__ = ("out", "inputs", "rule")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], rule: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.rule = rule


class Tape:
    """Ordered log of differentiable operations, replayed backwards."""

    def __init__(self):
        self.records: list[TapeRecord] = []

    def record(self, out: Tensor, inputs: Sequence[Tensor], rule: Callable) -> None:
        self.records.append(TapeRecord(out, inputs, rule))

    def __len__(self) -> int:
        return len(self.records)


def _finish(out_data, inputs, rule_factory, tape):
    """Wrap an op result; record on the tape when gradients can flow."""
    recording = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=recording)
    if recording:
        tape.record(out, inputs, rule_factory())
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` with d(loss)/d(tensor) for every requires_grad tensor
    reachable from ``loss`` through ``tape``. Repeated calls accumulate; use
    ``zero_grad`` to reset.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(rec.out is loss for rec in tape.records):
        raise ValueError("loss tensor was not produced through this tape")

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = adjoint.get(id(rec.out))
        if g is None:
            continue
        for t, gi in zip(rec.inputs, rec.rule(g)):
            if gi is None:
                continue
            acc = adjoint.get(id(t))
            if acc is None:
                adjoint[id(t)] = gi
            else:
                acc += gi

    applied: set[int] = set()
    for rec in tape.records:
        for t in (rec.out, *rec.inputs):
            if not t.requires_grad or id(t) in applied:
                continue
            g = adjoint.get(id(t))
            if g is None:
                continue
            applied.add(id(t))
            if t.grad is None:
                t.grad = g  # adjoint buffers are freshly owned, safe to hand over
            else:
                t.grad += g


# ---------------------------------------------------------------------------
# convolution ops

def _check_4d(t: Tensor, role: str) -> None:
    if t.data.ndim != 4:
        raise ValueError(f"{role} must be 4-D (B,C,H,W), got shape {t.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, tape: Tape | None = None) -> Tensor:
    """2-D cross-correlation with (outC, inC, kh, kw) weights, odd kernels only."""
    _check_4d(x, "conv2d input")
    _check_4d(weight, "conv2d weight")
    Cout, Cin, kh, kw = weight.shape
    if x.shape[1] != Cin:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {Cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride/padding ({stride}, {padding})")
    H, W = x.shape[2], x.shape[3]
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"conv2d: output would be {Ho}x{Wo} for input {H}x{W}, kernel {kh}x{kw}")
    if bias is not None and bias.shape != (Cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({Cout},)")

    out = kernels.conv2d_forward(x.data, weight.data, stride, padding)
    if bias is not None:
        out += bias.data.reshape(1, Cout, 1, 1)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def make_rule(xd=x.data, wd=weight.data, need_gx=x.requires_grad,
                  need_gw=weight.requires_grad,
                  need_gb=bias is not None and bias.requires_grad):
        def rule(g):
            gx, gw = kernels.conv2d_backward(xd, wd, g, stride, padding, need_gx, need_gw)
            if bias is None:
                return gx, gw
            gb = g.sum(axis=(0, 2, 3)) if need_gb else None
            return gx, gw, gb
        return rule

    return _finish(out, inputs, make_rule, tape)


def nearest_upsample2x(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Replicate every pixel into a 2x2 block."""
    _check_4d(x, "upsample input")
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def make_rule():
        def rule(g):
            return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)
        return rule

    return _finish(out, (x,), make_rule, tape)


def upsample2x_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                    tape: Tape | None = None) -> Tensor:
    """Nearest-neighbour 2x replication followed by a 3x3, stride-1, pad-1 conv."""
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ValueError(f"upsample2x_conv expects a 3x3 weight, got {weight.shape}")
    return conv2d(nearest_upsample2x(x, tape), weight, bias, stride=1, padding=1, tape=tape)


# ---------------------------------------------------------------------------
# elementwise ops
#
# add/mul accept equal shapes, a per-channel (1,C,1,1) operand against
# (B,C,H,W), or a plain python scalar. Anything else is rejected.

def _pair_mode(a: Tensor, b: Tensor) -> str:
    if a.shape == b.shape:
        return "same"
    if b.data.ndim == 4 and a.data.ndim == 4:
        if b.shape == (1, a.shape[1], 1, 1):
            return "bcast_b"
        if a.shape == (1, b.shape[1], 1, 1):
            return "bcast_a"
    raise ValueError(f"incompatible shapes {a.shape} and {b.shape} "
                     "(need equal shapes or a (1,C,1,1) channel operand)")


def _reduce_channel(g: np.ndarray) -> np.ndarray:
    return g.sum(axis=(0, 2, 3), keepdims=True)


def add(a: Tensor, b, tape: Tape | None = None) -> Tensor:
    if not isinstance(b, Tensor):
        def make_rule_s():
            return lambda g: (g.copy(),)
        return _finish(a.data + float(b), (a,), make_rule_s, tape)

    mode = _pair_mode(a, b)
    out = a.data + b.data

    def make_rule():
        def rule(g):
            ga = _reduce_channel(g) if mode == "bcast_a" else g.copy()
            gb = _reduce_channel(g) if mode == "bcast_b" else g.copy()
            return ga, gb
        return rule

    return _finish(out, (a, b), make_rule, tape)


def sub(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    mode = _pair_mode(a, b)
    out = a.data - b.data

    def make_rule():
        def rule(g):
            ga = _reduce_channel(g) if mode == "bcast_a" else g.copy()
            gb = -(_reduce_channel(g) if mode == "bcast_b" else g)
            return ga, gb
        return rule

    return _finish(out, (a, b), make_rule, tape)


def mul(a: Tensor, b, tape: Tape | None = None) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)

        def make_rule_s():
            return lambda g: (g * s,)
        return _finish(a.data * s, (a,), make_rule_s, tape)

    mode = _pair_mode(a, b)
    out = a.data * b.data

    def make_rule(ad=a.data, bd=b.data):
        def rule(g):
            ga = g * bd
            gb = g * ad
            if mode == "bcast_a":
                ga = _reduce_channel(ga)
            elif mode == "bcast_b":
                gb = _reduce_channel(gb)
            return ga, gb
        return rule

    return _finish(out, (a, b), make_rule, tape)


def leaky_relu(x: Tensor, slope: float = 0.2, tape: Tape | None = None) -> Tensor:
    out = np.where(x.data > 0, x.data, slope * x.data)

    def make_rule(xd=x.data):
        def rule(g):
            return (np.where(xd > 0, g, slope * g),)
        return rule

    return _finish(out, (x,), make_rule, tape)


def concat_channels(tensors: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    for t in tensors:
        _check_4d(t, "concat operand")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def make_rule():
        def rule(g):
            return tuple(part.copy() for part in np.split(g, splits, axis=1))
        return rule

    return _finish(out, tuple(tensors), make_rule, tape)


def abs_val(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = np.abs(x.data)

    def make_rule(xd=x.data):
        def rule(g):
            return (g * np.sign(xd),)
        return rule

    return _finish(out, (x,), make_rule, tape)


def square(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = x.data * x.data

    def make_rule(xd=x.data):
        def rule(g):
            return (2.0 * xd * g,)
        return rule

    return _finish(out, (x,), make_rule, tape)


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = np.asarray(x.data.sum())

    def make_rule(shape=x.shape):
        def rule(g):
            return (np.full(shape, float(g)),)
        return rule

    return _finish(out, (x,), make_rule, tape)


def mean_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean())

    def make_rule(shape=x.shape):
        def rule(g):
            return (np.full(shape, float(g) / n),)
        return rule

    return _finish(out, (x,), make_rule, tape)


# ---------------------------------------------------------------------------
# finite differences (the test oracle for every backward rule)

def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], at: Tensor,
                     eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a tensor-to-scalar function."""
    if eps <= 0:
        raise ValueError("eps must be positive")

    def evaluate(arr) -> float:
        res = f(Tensor(arr))
        val = res.item() if isinstance(res, Tensor) else float(res)
        if not np.isfinite(val):
            raise NumericError("finite_diff_grad: function returned a non-finite value")
        return val

    base = at.data.copy()
    grad = np.empty_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = evaluate(base)
        flat[i] = orig - eps
        fm = evaluate(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return Tensor(grad)
