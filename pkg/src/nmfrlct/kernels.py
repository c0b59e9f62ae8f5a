"""Backend selection for the hot loops.

The compiled extension is used when it imports; otherwise, or when
``NMFRLCT_PURE_PYTHON=1`` is set, the numpy fallback is used.  Both consume
random numbers identically, so chains agree bit for bit across backends.
"""

import os

from . import _fallback

fallback = _fallback
compiled = None
if not os.environ.get("NMFRLCT_PURE_PYTHON"):
    try:
        from . import _kernels as compiled
    except ImportError:
        compiled = None

_impl = compiled if compiled is not None else _fallback
BACKEND = "cython" if compiled is not None else "python"

gibbs_sweeps = _impl.gibbs_sweeps
predictive_stats = _impl.predictive_stats
vb_iterate = _impl.vb_iterate
