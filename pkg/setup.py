"""Build script.

The stepping kernel lives in a Cython extension (vibrosand._core). If the
extension cannot be built (no compiler, no Cython), the install still succeeds
and the package falls back to the pure-numpy engine at import time.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "vibrosand._core",
                sources=["src/vibrosand/_core.pyx"],
                include_dirs=[numpy.get_include()],
                # the compiled kernel must reproduce the pure-Python engine
                # bit for bit: no FMA contraction, and no fusing the separate
                # sin/cos calls into glibc sincos (last-ulp different)
                extra_compile_args=["-O3", "-ffp-contract=off",
                                    "-fno-builtin-sin", "-fno-builtin-cos"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    sys.stderr.write(f"vibrosand: building without compiled core ({exc})\n")

setup(ext_modules=ext_modules)
