"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback.  Set ``MNARTRI_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _fallback

SQUARED = _fallback.SQUARED
ABSOLUTE = _fallback.ABSOLUTE

_compiled = None
if os.environ.get("MNARTRI_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

BACKENDS = {"python": _fallback}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

BACKEND = "compiled" if _compiled is not None else "python"


def get(name=None):
    """Kernel module by name; ``None`` returns the active backend."""
    return BACKENDS[name or BACKEND]


unpack = _fallback.unpack
