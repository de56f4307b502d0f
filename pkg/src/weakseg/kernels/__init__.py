"""Hot inner-loop kernels.

Two interchangeable backends exist: numba-compiled loops and a pure-numpy
path. ``WEAKSEG_KERNELS=numpy`` forces the fallback; the default is numba
when it imports cleanly.
"""

import logging
import os

from . import _numpy

logger = logging.getLogger(__name__)

_requested = os.environ.get("WEAKSEG_KERNELS", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"WEAKSEG_KERNELS must be 'numba' or 'numpy', got {_requested!r}")

BACKEND = "numpy"
_impl = _numpy
if _requested == "numba":
    try:
        from . import _numba

        _impl = _numba
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is a declared dependency
        logger.warning("numba unavailable, falling back to numpy kernels")

splitmix64_block = _impl.splitmix64_block
box_blur = _impl.box_blur
im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3
maxpool2x2_forward = _impl.maxpool2x2_forward
maxpool2x2_backward = _impl.maxpool2x2_backward

__all__ = [
    "BACKEND",
    "splitmix64_block",
    "box_blur",
    "im2col3x3",
    "col2im3x3",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
]
