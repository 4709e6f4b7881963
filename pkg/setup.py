"""Build hook for the optional compiled kernels.

The extension is skipped when Cython or a compiler is unavailable; the
package then runs on its numpy fallback.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("SCRPRIOR_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "scrprior._kernels",
                    ["src/scrprior/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
