import os

from setuptools import setup

ext_modules = []
if os.environ.get("HETFUSE_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:  # pure-Python install; kernels fall back at import
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "hetfuse._kernels",
                    ["src/hetfuse/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
