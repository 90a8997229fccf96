"""Numeric kernel backend selection.

The hot kernels (GELU, row softmax, row logsumexp, layer norm, Levenshtein)
exist twice: a compiled Cython extension (``_fastkernels``) and a pure-numpy
fallback (``numpy_kernels``) with identical signatures and semantics. The
compiled module is preferred when importable; set ``SPEECHBRIDGE_KERNELS`` to
``numpy`` or ``compiled`` to force one side. ``benchmarks/bench_kernels.py``
compares the two.

Kernel calling convention: elementwise kernels take 1-D contiguous arrays,
row kernels take 2-D contiguous arrays (rows are the normalized slices),
``levenshtein`` takes 1-D int64 arrays. Callers reshape.
"""

import os

_requested = os.environ.get("SPEECHBRIDGE_KERNELS", "").strip().lower()

if _requested not in ("", "compiled", "numpy"):
    raise ValueError(
        f"SPEECHBRIDGE_KERNELS must be 'compiled' or 'numpy', got {_requested!r}"
    )

if _requested == "numpy":
    from . import numpy_kernels as _impl

    BACKEND = "numpy"
else:
    try:
        from . import _fastkernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        from . import numpy_kernels as _impl

        BACKEND = "numpy"

gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
softmax_rows = _impl.softmax_rows
softmax_rows_bwd = _impl.softmax_rows_bwd
lse_rows = _impl.lse_rows
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
levenshtein = _impl.levenshtein
