"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementation in ``_pykernels`` takes over. Setting
``TKL_BACKEND=python`` forces the fallback.
"""

import contextlib
import logging
import os

from tkl import _pykernels

log = logging.getLogger(__name__)

try:
    from tkl import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels


def _default():
    requested = os.environ.get("TKL_BACKEND", "").strip().lower()
    if requested:
        if requested not in BACKENDS:
            log.warning("backend %r unavailable, using fallback", requested)
            return "python"
        return requested
    return "cython" if "cython" in BACKENDS else "python"


_active = _default()


def name():
    return _active


def kernels():
    return BACKENDS[_active]


def available():
    return sorted(BACKENDS)


@contextlib.contextmanager
def use(backend):
    """Temporarily switch the active backend (tests and benchmarks)."""
    global _active
    if backend not in BACKENDS:
        raise ValueError(f"backend {backend!r} not available; have {available()}")
    previous, _active = _active, backend
    try:
        yield BACKENDS[backend]
    finally:
        _active = previous
