"""Build script: compiles the optional Cython kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so a failed compilation only costs speed.
"""

import sys

from setuptools import setup

extensions = []
try:
    from Cython.Build import cythonize
    from setuptools import Extension

    extensions = cythonize(
        [
            Extension(
                "alien_ue._kernels._native",
                ["src/alien_ue/_kernels/_native.pyx"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - build-env dependent
    print(f"cython extension skipped ({exc}); pure-python kernels will be used", file=sys.stderr)

setup(ext_modules=extensions)
