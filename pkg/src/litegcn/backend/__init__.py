"""Kernel backend selection.

The batch forward/backward of the graph-convolution block dominates training
time, so it comes in two interchangeable implementations: a Cython extension
(``_gcnkern``) built at install time, and a numpy fallback (``pyref``). The
compiled one is picked when importable; set ``LITEGCN_BACKEND=python`` or
``LITEGCN_BACKEND=compiled`` to force a choice (forcing ``compiled`` raises
if the extension is missing).
"""

from __future__ import annotations

import os

from . import pyref

_requested = os.environ.get("LITEGCN_BACKEND", "auto").strip().lower()

if _requested in ("auto", ""):
    try:
        from . import _gcnkern as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = pyref
elif _requested in ("compiled", "c", "cython"):
    from . import _gcnkern as _impl  # type: ignore[attr-defined]
elif _requested in ("python", "numpy", "py"):
    _impl = pyref
else:
    raise ValueError(
        f"LITEGCN_BACKEND={_requested!r} not recognized (use 'auto', 'compiled' or 'python')"
    )

BACKEND = _impl.NAME
batch_grads = _impl.batch_grads
batch_logits = _impl.batch_logits


def available_backends() -> list[str]:
    """Names of the backends importable in this environment."""
    names = ["python"]
    try:
        from . import _gcnkern  # noqa: F401
    except ImportError:
        return names
    return ["compiled"] + names


def get_backend(name: str):
    """Fetch a specific backend module by name (for benchmarks and tests)."""
    if name == "python":
        return pyref
    if name == "compiled":
        from . import _gcnkern
        return _gcnkern
    raise ValueError(f"unknown backend {name!r}")
