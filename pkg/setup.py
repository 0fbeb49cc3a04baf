"""Build script for the optional compiled kernel core.

The package works without the extension (a numpy fallback is selected at
import time); building it just makes resampling and the conv2d im2col/col2im
loops faster.
"""
from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "segforge._kernels._compiled",
                sources=["src/segforge/_kernels/_compiled.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
