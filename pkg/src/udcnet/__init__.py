"""UDC image degradation simulator and restoration network trainer.

Everything runs on a small f64 tensor engine with an explicit-tape reverse
mode, so the whole pipeline (simulate, train, evaluate, infer) is
self-contained and deterministic for a fixed seed.
"""

import os

# Honour UDC_THREADS before numpy pulls in a BLAS. 0 or 1 pins the math
# libraries to a single thread, which fixes the reduction order (the
# deterministic mode used by the tests). Best effort: a numpy imported
# earlier by the host process wins.
if os.environ.get("UDC_THREADS") in ("0", "1"):
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(_var, "1")
del os

from .errors import ConfigError, DataError, NumericError, UdcError, UdctFormatError
from .tensor import Tape, Tensor, backward, conv2d, finite_diff_grad

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "conv2d",
    "finite_diff_grad",
    "UdcError",
    "DataError",
    "UdctFormatError",
    "ConfigError",
    "NumericError",
    "__version__",
]
