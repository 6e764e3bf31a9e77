"""Build script for the optional compiled rollout kernel.

The package is fully functional without the extension (a pure-Python
backend is selected at import time); the build is therefore best-effort.
"""

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the Cython kernel if possible, otherwise continue without it."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # missing compiler, etc.
            print(f"warning: skipping compiled kernel build ({exc})")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: could not build {ext.name} ({exc}); "
                  "falling back to pure-Python backend")


def _extensions():
    from pathlib import Path
    pyx = Path(__file__).parent / "src" / "dragplan" / "engine" / "_fastloop.pyx"
    if not pyx.exists():
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("warning: Cython not available; building without compiled kernel")
        return []
    ext = Extension(
        "dragplan.engine._fastloop",
        sources=["src/dragplan/engine/_fastloop.pyx"],
    )
    return cythonize([ext], compiler_directives={
        "language_level": "3",
        "boundscheck": False,
        "wraparound": False,
        "cdivision": True,
    })


setup(cmdclass={"build_ext": OptionalBuildExt}, ext_modules=_extensions())
