"""Backend selection for the hot kernels.

The compiled extension is preferred when it imports cleanly; otherwise the
numpy fallback takes over transparently. Override with UDC_BACKEND=compiled
or UDC_BACKEND=fallback (compiled raises at import if unavailable, so a
forced setting never silently degrades).

Both backends implement:
    conv2d_forward(x, w, stride, pad) -> out
    conv2d_backward(x, w, gout, stride, pad, need_gx, need_gw) -> (gx, gw)
    dynconv_forward(feat, kern, k) -> out
    dynconv_backward(feat, kern, gout, k, need_gf, need_gk) -> (gf, gk)
"""

import os

from . import numpy_backend

_choice = os.environ.get("UDC_BACKEND", "auto").lower()

if _choice == "fallback":
    _impl = numpy_backend
elif _choice == "compiled":
    from . import _fastkern as _impl  # noqa: F401  (ImportError is intentional here)
else:
    try:
        from . import _fastkern as _impl
    except ImportError:
        _impl = numpy_backend

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
dynconv_forward = _impl.dynconv_forward
dynconv_backward = _impl.dynconv_backward


def backend_name() -> str:
    return _impl.NAME


def get_backends():
    """(name, module) pairs of every importable backend, for tests and benchmarks."""
    pairs = [("numpy", numpy_backend)]
    try:
        from . import _fastkern

        pairs.append(("compiled", _fastkern))
    except ImportError:
        pass
    return pairs
