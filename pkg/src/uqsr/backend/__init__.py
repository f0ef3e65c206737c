"""Convolution backend: compiled core with pure-NumPy fallback.

The hot kernels behind `conv3d_*` are the im2col gather/scatter loops
and a caching NumPy allocator (first-touch page faults are expensive on
the sandboxed kernels this package targets, and the training loop
recycles identical buffer shapes every step). Both ship as Cython
extensions; when either is missing the NumPy equivalents take over.
`UQSR_BACKEND=python|cython` forces the gather choice (forcing `cython`
when the extension is missing raises). `benchmarks/bench_backends.py`
compares the two.

Contractions themselves are numpy matmuls in both modes; use
`uqsr.parallel.set_threads` to control the BLAS pool.
"""

import os

from . import _conv, _gather_py

_requested = os.environ.get("UQSR_BACKEND", "auto").lower()

if _requested == "python":
    _gather = _gather_py
    NAME = "numpy"
elif _requested == "cython":
    from . import _gather_cy as _gather  # noqa: F401 - ImportError is the contract

    NAME = "cython"
else:
    try:
        from . import _gather_cy as _gather

        NAME = "cython"
    except ImportError:
        _gather = _gather_py
        NAME = "numpy"

ALLOC_CACHE = False
if os.environ.get("UQSR_ALLOC_CACHE", "1") != "0":
    try:
        from . import _alloc_cy

        ALLOC_CACHE = _alloc_cy.install_cache()
    except ImportError:
        pass

_conv3d = _conv.Conv3d(_gather)
conv3d_reference = _conv.conv3d_reference


def conv3d_forward(x, w, b, keep_col=False):
    return _conv3d.forward(x, w, b, keep_col)


def conv3d_backward_input(gout, w, in_shape):
    return _conv3d.backward_input(gout, w, in_shape)


def conv3d_backward_weight(gout, x, k, col=None):
    return _conv3d.backward_weight(gout, x, k, col)
