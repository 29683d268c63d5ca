"""Zhang-Suen thinning with a compiled fast path.

The compiled extension (vamae._thinning, built from Cython) and the
vectorized numpy fallback implement the identical algorithm; the fallback is
used when the extension is missing or when VAMAE_PURE_PYTHON=1 is set.
``benchmarks/bench_thinning.py`` compares the two.
"""

import os

from vamae import _thinning_py

if os.environ.get("VAMAE_PURE_PYTHON") == "1":
    _impl = _thinning_py
    HAVE_COMPILED = False
else:
    try:
        from vamae import _thinning as _impl  # type: ignore[no-redef]

        HAVE_COMPILED = True
    except ImportError:
        _impl = _thinning_py
        HAVE_COMPILED = False

zhang_suen_thin = _impl.zhang_suen_thin
