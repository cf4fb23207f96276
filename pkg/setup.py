"""Build the optional compiled kernels.

    pip install -e . --no-build-isolation
    python setup.py build_ext --inplace
"""
from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension
except ImportError:  # numpy fallback only
    pass
else:
    ext_modules = cythonize(
        [
            Extension(
                "latent_nerf._kernels._ckernels",
                ["src/latent_nerf/_kernels/_ckernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    )

setup(ext_modules=ext_modules)
