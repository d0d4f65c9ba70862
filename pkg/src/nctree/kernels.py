"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``NCTREE_PURE_PYTHON=1`` to force the fallback.
"""

import os

if os.environ.get("NCTREE_PURE_PYTHON", "") not in ("", "0"):
    from nctree import _pykernels as _impl

    BACKEND = "python"
else:
    try:
        from nctree import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        from nctree import _pykernels as _impl

        BACKEND = "python"

bin_sums = _impl.bin_sums
enumerate_pair_table = _impl.enumerate_pair_table
