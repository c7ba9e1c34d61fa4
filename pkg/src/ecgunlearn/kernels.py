"""Backend selection for the conv1d hot loops.

The compiled extension is used when it was built; otherwise, or when the
environment variable ``ECGUNLEARN_BACKEND=python`` is set, the numpy kernels
are used. Both backends agree to ~1e-12 relative but are not bit-identical,
so determinism guarantees hold per backend.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("ECGUNLEARN_BACKEND", "").lower() != "python":
    try:
        from . import _kernels_c as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

conv1d_forward = _impl.conv1d_forward
conv1d_backward_weight = _impl.conv1d_backward_weight
conv1d_backward_input = _impl.conv1d_backward_input


def backends():
    """Return {name: module} for every importable backend."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels_c
        found["cython"] = _kernels_c
    except ImportError:
        pass
    return found
