"""Backend selection for the hot kernels.

The compiled module ``_ckernels`` is used when it was built; otherwise the
numpy versions from ``_pykernels`` are used.  Setting the environment
variable ``AFEM_GMRES_KERNELS=python`` forces the numpy fallback.
"""
import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

_ckernels = None
if os.environ.get("AFEM_GMRES_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels
    except ImportError:  # pragma: no cover - depends on the build
        log.debug("compiled kernels unavailable, using numpy fallback")

BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels

BACKEND = "cython" if _ckernels is not None else "python"
_impl = BACKENDS[BACKEND]

patch_apply = _impl.patch_apply
nvb_closure = _impl.nvb_closure
minimal_bulk = _impl.minimal_bulk


def get_backend(name=None):
    """Return the kernel module ``name`` (default: the active one)."""
    if name is None:
        return _impl
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {sorted(BACKENDS)}") from None
