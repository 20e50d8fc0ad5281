"""Build shim for the compiled kernel extension.

The package is fully functional without the extension (numpy fallback
selected at import); a failed native build therefore degrades to a
pure-Python install instead of failing it.
"""

import sys

from setuptools import setup


def extensions():
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        return []
    ext = Extension(
        "hmnet._core",
        sources=["src/hmnet/_core.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": 3})


try:
    setup(ext_modules=extensions())
except SystemExit:
    raise
except Exception as exc:  # compiler missing etc.
    print(f"native kernel build failed ({exc}); installing pure-python fallback",
          file=sys.stderr)
    setup(ext_modules=[])
