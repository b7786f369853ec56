"""Backend selection for the batched stepping kernels.

Imports the compiled Cython module when available, otherwise the numpy
fallback.  Setting the environment variable ``LIE_ANNEAL_FORCE_FALLBACK=1``
forces the fallback (used by the backend benchmark and tests).
"""

import os

if os.environ.get("LIE_ANNEAL_FORCE_FALLBACK"):
    from . import _fallback as impl
    BACKEND = "numpy"
else:
    try:
        from . import _speedups as impl
        BACKEND = "cython"
    except ImportError:
        from . import _fallback as impl
        BACKEND = "numpy"

torus_step = impl.torus_step
heis_step = impl.heis_step
heis_reduce = impl.heis_reduce
su2_exp = impl.su2_exp
su2_mul = impl.su2_mul
su2_step = impl.su2_step

__all__ = [
    "BACKEND",
    "torus_step",
    "heis_step",
    "heis_reduce",
    "su2_exp",
    "su2_mul",
    "su2_step",
]
