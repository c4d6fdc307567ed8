from setuptools import setup
from setuptools.extension import Extension

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "pmaa.kernels._convext",
                ["src/pmaa/kernels/_convext.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # No Cython available: install with the NumPy kernel backend only.
    ext_modules = []

setup(ext_modules=ext_modules)
