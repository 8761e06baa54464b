"""Build script for the compiled kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile only costs speed. Run
``pip install -e . --no-build-isolation`` to build in place.
"""

import sys

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    extensions = cythonize(
        [
            Extension(
                "udcnet.kernels._fastkern",
                ["src/udcnet/kernels/_fastkern.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    print(f"warning: compiled kernels skipped ({exc}); numpy fallback will be used", file=sys.stderr)
    extensions = []

setup(ext_modules=extensions)
