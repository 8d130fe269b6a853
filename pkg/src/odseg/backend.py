"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy/pure-Python
fallback. Set ``ODSEG_BACKEND=python`` to force the fallback.
"""
import logging
import os

from odseg import _fallback

log = logging.getLogger(__name__)

_KERNEL_NAMES = ("im2col3d", "col2im3d", "conv3d_naive", "label26")


def _load():
    if os.environ.get("ODSEG_BACKEND", "").lower() == "python":
        return _fallback, "python"
    try:
        from odseg import _kernels
    except ImportError as exc:
        log.debug("compiled kernels unavailable (%s), using fallback", exc)
        return _fallback, "python"
    return _kernels, "cython"


_module, NAME = _load()

im2col3d = _module.im2col3d
col2im3d = _module.col2im3d
conv3d_naive = _module.conv3d_naive
label26 = _module.label26


def get(name):
    """Return a kernel module by backend name (``"cython"`` or ``"python"``)."""
    if name == "python":
        return _fallback
    if name == "cython":
        from odseg import _kernels
        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def available():
    names = ["python"]
    try:
        from odseg import _kernels  # noqa: F401
        names.append("cython")
    except ImportError:
        pass
    return names
