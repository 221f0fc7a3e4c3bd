"""Backend selection for the hot loops.

The compiled extension ``typorec._core`` is used when importable; otherwise,
or when the environment variable ``TYPOREC_PURE`` is set to a non-empty value
other than ``0``, the numpy implementations in ``typorec._pure`` are used.
"""

import os

from typorec import _pure

_force_pure = os.environ.get("TYPOREC_PURE", "") not in ("", "0")

if _force_pure:
    _impl = _pure
    BACKEND = "python"
else:
    try:
        from typorec import _core as _impl
        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _pure
        BACKEND = "python"

HAMMING_MISSING = _pure.HAMMING_MISSING

fast_response = _impl.fast_response
hamming_top2 = _impl.hamming_top2
l2_top2 = _impl.l2_top2
kdtree_top2 = _impl.kdtree_top2


def backends():
    """Map backend name to implementation module, for tests and benchmarks."""
    out = {"python": _pure}
    try:
        from typorec import _core
        out["compiled"] = _core
    except ImportError:
        pass
    return out
