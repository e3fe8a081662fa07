"""Kernel backend selection.

The compiled extension is used when importable; ``DDGS_BACKEND=python``
forces the numpy fallback.
"""

from __future__ import annotations

import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels


def _default() -> str:
    want = os.environ.get("DDGS_BACKEND", "").strip().lower()
    if want:
        if want not in BACKENDS:
            raise ImportError(f"DDGS_BACKEND={want!r} unavailable; have {sorted(BACKENDS)}")
        return want
    if _ckernels is None:
        log.warning("ddgs: compiled kernels not built, using numpy fallback")
        return "python"
    return "cython"


DEFAULT_BACKEND = _default()


def get(name: str | None = None):
    return BACKENDS[name or DEFAULT_BACKEND]
