"""Builds the optional compiled ranking kernel.

If Cython or a C compiler is missing the package still installs and the
pure-Python kernel is used instead.
"""
from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "dimreid.eval._rank_cy",
                ["src/dimreid/eval/_rank_cy.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
