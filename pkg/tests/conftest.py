"""Deterministic single-thread mode for the whole suite, set before numpy
loads a BLAS."""

import os

os.environ.setdefault("UDC_THREADS", "0")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)
