from setuptools import Extension, setup

# The compiled kernel core is optional: if Cython (or a C compiler) is not
# available the package falls back to the pure-numpy kernels at import time.
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "ssmq._core",
                ["src/ssmq/_core.pyx"],
                # -ffp-contract=off: keep add/mul sequences identical to the
                # numpy fallback (no FMA contraction).
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "initializedcheck": False,
            "cdivision": True,
        },
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
