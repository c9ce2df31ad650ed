"""Build script for the optional compiled convolution kernels.

The package is fully functional without the extension (a numpy fallback is
selected at import time); the Cython module just makes training faster.
"""

from setuptools import Extension, setup

try:
    import numpy
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "eraseg._kernels._conv_cython",
                ["src/eraseg/_kernels/_conv_cython.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
