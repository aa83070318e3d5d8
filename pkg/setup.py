"""Build the optional compiled quadrature kernels.

If Cython or a C compiler is unavailable the package still installs and
falls back to the pure-numpy kernels at import time.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("UMNN_NO_EXT"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "umnn._kernels",
                    ["src/umnn/_kernels.pyx"],
                    extra_compile_args=["-O3", "-fno-math-errno", "-fno-trapping-math"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
