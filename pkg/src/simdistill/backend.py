"""Kernel backend selection.

The hot kernels exist twice: a Cython extension (``simdistill._core``) and a
numpy fallback (``simdistill._core_py``). The compiled core is preferred when
it imported cleanly; ``SIMDISTILL_BACKEND=python`` or ``=cython`` forces the
choice. ``benchmarks/bench_backends.py`` compares the two.
"""

import os

from . import _core_py

_forced = os.environ.get("SIMDISTILL_BACKEND", "").strip().lower()

if _forced == "python":
    kernels = _core_py
else:
    try:
        from . import _core as kernels  # type: ignore[no-redef]
    except ImportError:
        if _forced == "cython":
            raise ImportError(
                "SIMDISTILL_BACKEND=cython but the compiled core is not "
                "available; reinstall with the extension built"
            )
        kernels = _core_py

BACKEND = kernels.NAME


def available_backends():
    """Names of the kernel implementations importable in this environment."""
    names = ["python"]
    try:
        from . import _core  # noqa: F401

        names.insert(0, "cython")
    except ImportError:
        pass
    return names
