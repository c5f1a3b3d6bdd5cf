import os

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    USE_CYTHON = True
except ImportError:
    USE_CYTHON = False

# LISTRERANK_NO_EXT=1 skips the compiled core; the package then runs on its
# pure-Python kernels.
if os.environ.get("LISTRERANK_NO_EXT") or not USE_CYTHON:
    EXTENSIONS = []
else:
    EXTENSIONS = cythonize(
        [
            Extension(
                "listrerank._kernels",
                ["src/listrerank/_kernels.pyx"],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=EXTENSIONS)
