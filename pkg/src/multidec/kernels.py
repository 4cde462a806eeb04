"""Kernel dispatch: the compiled extension when importable, else pure Python.

Set ``MULTIDEC_PURE_PYTHON=1`` before import to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"

if os.environ.get("MULTIDEC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

ctc_forward_backward = _impl.ctc_forward_backward
ctc_prefix_extend = _impl.ctc_prefix_extend
edit_distance_ops = _impl.edit_distance_ops

__all__ = ["BACKEND", "ctc_forward_backward", "ctc_prefix_extend", "edit_distance_ops"]
