"""Build the optional Cython aggregation kernels.

If Cython or a C compiler is unavailable the package still installs and
``hybridml.kernels`` falls back to the numpy implementation.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("HYBRIDML_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        extensions = [
            Extension(
                "hybridml._kernels",
                ["src/hybridml/_kernels.pyx"],
                include_dirs=[np.get_include()],
                # no FMA contraction: results must match the numpy fallback bit for bit
                extra_compile_args=["-O3", "-ffp-contract=off", "-fno-fast-math"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ]
        ext_modules = cythonize(
            extensions,
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
