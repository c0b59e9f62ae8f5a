import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

numpy_random_lib = os.path.join(os.path.dirname(np.__file__), "random", "lib")

extensions = []
if cythonize is not None and not os.environ.get("NMFRLCT_NO_EXTENSION"):
    extensions = cythonize(
        [
            Extension(
                "nmfrlct._kernels",
                ["src/nmfrlct/_kernels.pyx"],
                include_dirs=[np.get_include()],
                library_dirs=[numpy_random_lib],
                libraries=["npyrandom"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                # keep IEEE semantics identical to the numpy fallback
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=extensions)
