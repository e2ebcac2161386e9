"""Kernel backend selection.

The compiled extension is used when it imported cleanly; otherwise the
NumPy implementation takes over. Set VLPERT_BACKEND=numpy or =compiled to
force one side (forcing the compiled side raises if it is unavailable).
"""

from __future__ import annotations

import os

from . import _kernels_np

_requested = os.environ.get("VLPERT_BACKEND", "").strip().lower()

if _requested not in ("", "compiled", "numpy"):
    raise ValueError(f"VLPERT_BACKEND must be 'compiled' or 'numpy', got {_requested!r}")

if _requested == "numpy":
    _impl = _kernels_np
    _name = "numpy"
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        _name = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = _kernels_np
        _name = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_grad_input = _impl.conv2d_grad_input
conv2d_grad_weights = _impl.conv2d_grad_weights


def backend_name() -> str:
    """Which kernel implementation is active: 'compiled' or 'numpy'."""
    return _name
