"""Pick the compiled kernels when available, else the numpy fallback.

Set ``LLSA_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

if os.environ.get("LLSA_PURE_PYTHON", "") not in ("", "0"):
    kernels = _pykernels
else:
    try:
        from . import _kernels as kernels
    except ImportError:  # extension not built
        kernels = _pykernels

BACKEND = "compiled" if kernels is not _pykernels else "python"


def available_backends():
    """Mapping name -> kernel module for every importable backend."""
    found = {"python": _pykernels}
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        found["compiled"] = _kernels
    return found


def use_backend(name):
    """Switch the kernel module used by every llsa operation."""
    global kernels, BACKEND
    found = available_backends()
    if name not in found:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(found)}")
    kernels = found[name]
    BACKEND = name


def set_num_threads(n=None):
    """Worker count for the parallel kernels (default: every available CPU)."""
    n = (os.cpu_count() or 1) if n is None else int(n)
    for mod in available_backends().values():
        mod.set_num_threads(n)


def get_num_threads():
    return kernels.get_num_threads()


def current_backend():
    """Name of the kernel module in use ('compiled' or 'python')."""
    return BACKEND
