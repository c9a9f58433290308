"""Per-event frontend kernels: compiled when available, numpy otherwise.

Set ``EVENTVO_PURE_PYTHON=1`` to force the numpy versions.
"""

import os

from . import _pykernels as python

HYPOTHESES = python.HYPOTHESES

compiled = None
if os.environ.get("EVENTVO_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

backend = compiled if compiled is not None else python
BACKEND_NAME = "compiled" if compiled is not None else "python"


def get(name="auto"):
    """Kernel module by name: ``auto``, ``compiled`` or ``python``."""
    if name == "auto":
        return backend
    if name == "python":
        return python
    if name == "compiled":
        if compiled is None:
            raise ImportError("compiled kernels are not built")
        return compiled
    raise ValueError(f"unknown kernel backend {name!r}")
