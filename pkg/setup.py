"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension: vlcache._kernels
falls back to a numpy implementation at import time. Set VLCACHE_NO_EXT=1
to skip the compile step entirely.
"""

import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("VLCACHE_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "vlcache._kernels._core",
                    ["src/vlcache/_kernels/_core.pyx"],
                    include_dirs=[numpy.get_include()],
                    # no -ffast-math: the kernels promise libm-exact expf
                    # and strictly ordered accumulation
                    extra_compile_args=["-O3", "-march=native", "-fno-math-errno"],
                    libraries=["m"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # No Cython or numpy at build time: ship the pure-python package.
        ext_modules = []

setup(ext_modules=ext_modules)
