"""Build the compiled kernel extension.

The package works without it (NumPy fallback selected at import), so a
failed compile downgrades to a warning instead of killing the install.
"""

import sys

from setuptools import setup


def _extensions():
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError as exc:  # pragma: no cover - build env issue
        print(f"stylevox: skipping compiled kernels ({exc})", file=sys.stderr)
        return []
    import os

    if not os.path.exists("src/stylevox/kernels/ck.pyx"):
        return []
    ext = Extension(
        "stylevox.kernels.ck",
        sources=["src/stylevox/kernels/ck.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize(
        [ext],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )


setup(ext_modules=_extensions())
