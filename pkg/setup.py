from Cython.Build import cythonize
from setuptools import Extension, setup

# Strict IEEE float semantics are required: the compiled kernels must be
# bit-identical to the pure NumPy fallback. Do not add -ffast-math or
# -march flags that enable FMA contraction.
extensions = [
    Extension(
        "binomark.kernels._fast",
        ["src/binomark/kernels/_fast.pyx"],
        extra_compile_args=["-O3"],
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
)
