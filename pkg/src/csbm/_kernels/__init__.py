"""Hot kernels with a compiled core and a pure-Python fallback.

The Cython extension ``_core`` is used when it was built; otherwise, or when
the environment variable ``CSBM_FORCE_PYTHON=1`` is set at import time, the
numpy implementations in ``_fallback`` are used. ``BACKEND`` names the
selected implementation.
"""
import os

from . import _fallback

if os.environ.get("CSBM_FORCE_PYTHON") == "1":
    _impl = _fallback
else:
    try:
        from . import _core as _impl
    except ImportError:  # extension not built
        _impl = _fallback

BACKEND = "python" if _impl is _fallback else "cython"
bp_sweep = _impl.bp_sweep
mcmc_chain = _impl.mcmc_chain


def backends():
    """Available kernel modules by name (``python`` always, ``cython`` if built)."""
    out = {"python": _fallback}
    try:
        from . import _core
    except ImportError:
        return out
    out["cython"] = _core
    return out


__all__ = ["BACKEND", "bp_sweep", "mcmc_chain", "backends"]
