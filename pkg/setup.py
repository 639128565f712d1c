"""Build hook: compiles the optional telemetry kernel extension when Cython
and a C toolchain are available, otherwise installs pure-Python only."""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/chatbench/telemetry/_kernels.pyx"],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
