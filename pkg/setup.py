"""Build hook for the optional compiled kernel extension.

The package works without the extension (a numpy fallback is selected at
import time); set CLUECAST_SKIP_EXT=1 to force a pure-Python build.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("CLUECAST_SKIP_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "cluecast._ckernels",
                    ["src/cluecast/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
