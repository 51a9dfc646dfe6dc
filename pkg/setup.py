"""Build script for the compiled convolution kernels.

The extension is optional: if Cython or a C compiler is unavailable the
package installs anyway and falls back to the numpy kernels at import time.
Build in place for a source checkout with:

    python setup.py build_ext --inplace
"""

from setuptools import setup

ext_modules = []
include_dirs = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "ssllab._kernels._convext",
                ["src/ssllab/_kernels/_convext.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )
    include_dirs = [numpy.get_include()]
except ImportError:
    pass

setup(
    ext_modules=ext_modules,
    include_dirs=include_dirs,
    package_dir={"": "src"},
)
