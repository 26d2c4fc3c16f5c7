"""Build script for the optional compiled QP kernel.

The package is pure Python except for mpctune._qpkernel, a Cython port of
the dense active-set solver. The extension is a strict accelerator: when
Cython or a C toolchain is missing the build logs a notice and the package
falls back to the numpy kernel at import time, so installation never fails
on the extension's account.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext as _build_ext


class build_ext(_build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:
            print(f"skipping compiled QP kernel ({exc}); "
                  "the numpy fallback will be used")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"skipping {ext.name} ({exc}); "
                  "the numpy fallback will be used")


def extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError as exc:
        print(f"compiled QP kernel not built ({exc}); "
              "the numpy fallback will be used")
        return []
    return cythonize(
        [Extension(
            "mpctune._qpkernel",
            ["src/mpctune/_qpkernel.pyx"],
            include_dirs=[numpy.get_include()],
        )],
        language_level=3,
    )


setup(ext_modules=extensions(), cmdclass={"build_ext": build_ext})
