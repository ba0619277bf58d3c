"""Backend selection for the convolution data-movement kernels.

The compiled extension is used when it imports; ``MASKSEG_KERNELS=python``
forces the numpy fallback. Both backends are bit-identical.
"""
import os

from . import _kernels_py

BACKEND = "python"
im2col = _kernels_py.im2col
col2im = _kernels_py.col2im

if os.environ.get("MASKSEG_KERNELS", "auto").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None
    if _compiled is not None:
        BACKEND = "cython"
        im2col = _compiled.im2col
        col2im = _compiled.col2im


def backends():
    """Return ``{name: (im2col, col2im)}`` for every importable backend."""
    found = {"python": (_kernels_py.im2col, _kernels_py.col2im)}
    try:
        from . import _kernels as mod
        found["cython"] = (mod.im2col, mod.col2im)
    except ImportError:
        pass
    return found
