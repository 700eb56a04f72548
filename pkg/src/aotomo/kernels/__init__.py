"""Hot-kernel backend selection.

The compiled Cython core is used when present; otherwise the NumPy fallback.
Set AOTOMO_KERNELS=numpy or AOTOMO_KERNELS=cython to force a backend (forcing
cython raises if the extension was not built). Both implementations are
importable directly for side-by-side benchmarking.
"""

import os

from . import _numpy

_requested = os.environ.get("AOTOMO_KERNELS", "").strip().lower()

if _requested == "numpy":
    _impl = _numpy
elif _requested in ("", "cython"):
    try:
        from . import _compiled as _impl
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _numpy
else:
    raise RuntimeError(f"unknown AOTOMO_KERNELS value: {_requested!r}")

BACKEND = _impl.BACKEND_NAME

bump = _impl.bump
bump_prime = _impl.bump_prime
robin_apply = _impl.robin_apply
dirichlet_apply = _impl.dirichlet_apply
edge_form_apply = _impl.edge_form_apply
bilinear_gather = _impl.bilinear_gather
bilinear_scatter = _impl.bilinear_scatter
radial_invert = _impl.radial_invert

__all__ = [
    "BACKEND",
    "bump",
    "bump_prime",
    "robin_apply",
    "dirichlet_apply",
    "edge_form_apply",
    "bilinear_gather",
    "bilinear_scatter",
    "radial_invert",
]
