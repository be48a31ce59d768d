"""Kernel backend selection.

The compiled core is used when it imports; otherwise the numpy twins. Set
``RBMLAB_BACKEND=python`` to force the fallback at import time, or use
:func:`use` to switch temporarily (tests, benchmarks).
"""
import contextlib
import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

_BACKENDS = {"python": _pykernels}
if _core is not None:
    _BACKENDS["compiled"] = _core


def available():
    return sorted(_BACKENDS)


def _initial():
    wanted = os.environ.get("RBMLAB_BACKEND", "").strip().lower()
    if wanted:
        if wanted not in _BACKENDS:
            raise ImportError(f"RBMLAB_BACKEND={wanted!r} not available; have {available()}")
        return wanted
    if _core is None:
        log.info("compiled core not built; using numpy kernels")
        return "python"
    return "compiled"


_active = _initial()


def name():
    return _active


def kernels():
    """Module implementing the kernel API for the active backend."""
    return _BACKENDS[_active]


def select(backend):
    global _active
    if backend not in _BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; have {available()}")
    _active = backend


@contextlib.contextmanager
def use(backend):
    previous = _active
    select(backend)
    try:
        yield kernels()
    finally:
        select(previous)
