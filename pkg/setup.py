"""Build the optional Cython kernel extension.

If Cython or a C compiler is unavailable the package still installs and the
numpy kernels in ``ecgunlearn._kernels_py`` are used instead.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("ECGUNLEARN_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "ecgunlearn._kernels_c",
                    ["src/ecgunlearn/_kernels_c.pyx"],
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
