"""Build script for the optional compiled thinning kernel.

The package works without the extension (a vectorized numpy fallback is
selected at import time); set VAMAE_NO_EXT=1 to skip compilation entirely.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("VAMAE_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "vamae._thinning",
                    ["src/vamae/_thinning.pyx"],
                    extra_compile_args=["-O3"],
                )
            ],
            language_level="3",
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
