"""Kernel backend selected at import.

The compiled extension ``adsa._kernels_c`` is used when it was built;
otherwise the numpy fallback. Set ``ADSA_PURE_PYTHON=1`` to force the
fallback.
"""

import os

from . import _kernels_py

if os.environ.get("ADSA_PURE_PYTHON"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels_c as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "cython" if _impl is not _kernels_py else "python"

similarity = _impl.similarity
attend = _impl.attend
rope = _impl.rope


def available_backends():
    """Map backend name to kernel module for every backend importable here."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels_c
    except ImportError:
        pass
    else:
        out["cython"] = _kernels_c
    return out
