"""Backend selection for the hot convolution/pooling kernels.

The compiled Cython extension is used when it was built; otherwise the
numpy fallback is selected. Set WRITERID_KERNELS=numpy (or =compiled)
to force a backend, e.g. for benchmarking.
"""

from __future__ import annotations

import os

from writerid import kernels_numpy

try:
    from writerid import _kernels
except ImportError:  # source-only install
    _kernels = None


def available_backends() -> dict[str, object]:
    backends = {"numpy": kernels_numpy}
    if _kernels is not None:
        backends["compiled"] = _kernels
    return backends


def _select() -> object:
    forced = os.environ.get("WRITERID_KERNELS", "").strip().lower()
    if forced:
        backends = available_backends()
        if forced not in backends:
            raise ImportError(
                f"WRITERID_KERNELS={forced!r} but only {sorted(backends)} are available"
            )
        return backends[forced]
    return _kernels if _kernels is not None else kernels_numpy


_active = _select()

BACKEND: str = _active.BACKEND
conv2d_forward = _active.conv2d_forward
conv2d_backward = _active.conv2d_backward
maxpool_forward = _active.maxpool_forward
maxpool_backward = _active.maxpool_backward
