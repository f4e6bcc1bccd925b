"""Build the optional Cython kernel extension.

The package works without it: chainrft._kernels falls back to the numpy
reference implementation when the compiled module is missing.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "chainrft._kernels._fast",
                ["src/chainrft/_kernels/_fast.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    print(f"chainrft: skipping Cython extension build ({exc}); "
          "the numpy fallback will be used")

setup(ext_modules=ext_modules)
