"""Builds the optional Cython EM kernel. The package works without it;
the numpy fallback is selected at import time."""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [Extension(
            "diffseg.staple._em_c",
            ["src/diffseg/staple/_em_c.pyx"],
            include_dirs=[numpy.get_include()],
            extra_compile_args=["-O3"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
