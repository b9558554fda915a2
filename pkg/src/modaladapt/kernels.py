"""Kernel backend selection.

The compiled extension is used when it imports cleanly; setting
``MODALADAPT_PURE=1`` forces the numpy fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MODALADAPT_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "compiled"

conv1d_frames = _impl.conv1d_frames
conv1d_kernel_grad = _impl.conv1d_kernel_grad
