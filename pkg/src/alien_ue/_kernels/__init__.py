"""Kernel backend selection.

Imports the compiled extension when available, otherwise the numpy fallback.
Set ``ALIEN_UE_BACKEND=python`` (or ``native``) to force a choice; forcing
``native`` when the extension is missing is an import error.
"""

import os

from . import pyref

_requested = os.environ.get("ALIEN_UE_BACKEND", "").strip().lower()

if _requested == "python":
    _impl = pyref
else:
    try:
        from . import _native as _impl
    except ImportError:
        if _requested == "native":
            raise ImportError(
                "ALIEN_UE_BACKEND=native but the compiled extension is not built"
            ) from None
        _impl = pyref

BACKEND = _impl.BACKEND_NAME
LOG_EPS = pyref.LOG_EPS
BCE_EPS = pyref.BCE_EPS

softmax_rows = _impl.softmax_rows
entropy_rows = _impl.entropy_rows
entropy_grad_rows = _impl.entropy_grad_rows
alien_backward_rows = _impl.alien_backward_rows
