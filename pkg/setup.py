import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = [
    Extension(
        "eiflow._kernels._core",
        ["src/eiflow/_kernels/_core.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

setup(
    # The package works without the compiled core: eiflow._kernels falls back
    # to the numpy reference implementation when this extension is absent.
    ext_modules=cythonize(extensions, language_level=3) if cythonize else [],
)
