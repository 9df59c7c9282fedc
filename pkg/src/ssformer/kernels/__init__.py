"""Hot-kernel dispatch: compiled extension when available, numpy otherwise.

Set SSF_KERNELS=numpy or SSF_KERNELS=native to force a backend; the
default prefers the extension and silently falls back. `BACKEND` names
the active choice. Call sites go through this module's attributes so the
backend (or a test double) can be swapped at runtime.
"""

import os

from . import _fallback

try:
    from . import _native
except ImportError:
    _native = None

_forced = os.environ.get("SSF_KERNELS", "").strip().lower()
if _forced == "numpy":
    _impl = _fallback
elif _forced == "native":
    if _native is None:
        raise ImportError("SSF_KERNELS=native but the compiled extension is not built")
    _impl = _native
else:
    _impl = _native if _native is not None else _fallback

BACKEND = "native" if _impl is _native and _native is not None else "numpy"

im2col = _impl.im2col
col2im = _impl.col2im

numpy_backend = _fallback
native_backend = _native
