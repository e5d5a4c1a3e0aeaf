import sys

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-python install; kernels fall back to numpy
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "ckd.tensor._fast_kernels",
                ["src/ckd/tensor/_fast_kernels.pyx"],
                include_dirs=[np.get_include()],
                # fast-math lets gcc vectorize exp through glibc's libmvec; it is
                # passed to the compiler only, so no FTZ startup code gets linked in
                extra_compile_args=["-O3", "-ffast-math"] if sys.platform.startswith("linux") else ["-O3"],
                extra_link_args=["-lmvec", "-lm"] if sys.platform.startswith("linux") else [],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
