import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("VITQ_NO_EXT", "") != "1":
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "vitq._kernels",
                ["src/vitq/_kernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                # no FMA contraction: results must match the numpy fallback bit for bit
                extra_compile_args=["-O3", "-ffp-contract=off", "-fno-math-errno"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
