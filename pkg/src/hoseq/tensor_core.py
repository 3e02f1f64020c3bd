"""Dense float64 tensors and the structural operations the fusion networks need.

A tensor here is a plain ``numpy.ndarray`` with dtype float64 in C (row-major)
layout.  Row-major order is fixed globally: ``flatten`` and the binary dataset
format both depend on it.  All operations are pure functions of their inputs.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, DimensionError

__all__ = [
    "as_tensor",
    "outer3",
    "outer3_batch",
    "conv3d",
    "conv3d_batch",
    "flatten",
    "sum_over_first_axis",
]


def as_tensor(values) -> np.ndarray:
    """Coerce to a C-contiguous float64 array of rank >= 1."""
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    return arr


def _require_vector(name: str, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"{name} must be a non-empty 1-D vector, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise DataError(f"{name} contains non-finite values")
    return v


def outer3(u, v, w) -> np.ndarray:
    """Rank-3 outer product: T[i, j, k] = u[i] * v[j] * w[k]."""
    u = _require_vector("u", u)
    v = _require_vector("v", v)
    w = _require_vector("w", w)
    return np.einsum("i,j,k->ijk", u, v, w)


def outer3_batch(u, v, w) -> np.ndarray:
    """``outer3`` applied row-wise to ``(batch, dim)`` matrices."""
    u, v, w = (np.asarray(m, dtype=np.float64) for m in (u, v, w))
    if not (u.ndim == v.ndim == w.ndim == 2):
        raise DimensionError("outer3_batch expects three 2-D (batch, dim) arrays")
    if not (u.shape[0] == v.shape[0] == w.shape[0]):
        raise DimensionError(
            f"batch sizes differ: {u.shape[0]}, {v.shape[0]}, {w.shape[0]}"
        )
    return np.einsum("bi,bj,bk->bijk", u, v, w)


def _as_kernel_stack(kernels) -> np.ndarray:
    """Stack a list of rank-3 kernels (or accept a pre-stacked rank-4 array)."""
    if isinstance(kernels, (list, tuple)):
        kernels = np.stack([np.asarray(k, dtype=np.float64) for k in kernels])
    else:
        kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim == 3:
        kernels = kernels[None]
    if kernels.ndim != 4:
        raise DimensionError(f"kernels must be rank-3 tensors, got stacked shape {kernels.shape}")
    return kernels


def conv3d(input3d, kernels, stride: int = 1, bias=None) -> np.ndarray:
    """Valid (unpadded) 3-D convolution, one output channel per kernel.

    Each output cell is the sum of elementwise products over the kernel
    window plus the channel's bias; the output extent per mode is
    ``(in - kernel) // stride + 1``.  Returns a rank-4 array
    ``(channels, out_depth, out_height, out_width)``.
    """
    inp = np.asarray(input3d, dtype=np.float64)
    if inp.ndim != 3:
        raise DimensionError(f"conv3d input must be rank 3, got shape {inp.shape}")
    return conv3d_batch(inp[None], kernels, stride, bias)[0]


def conv3d_batch(inputs, kernels, stride: int = 1, bias=None) -> np.ndarray:
    """``conv3d`` over a batch: (batch, D, H, W) -> (batch, channels, D', H', W')."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 4:
        raise DimensionError(f"conv3d_batch inputs must be rank 4, got shape {inputs.shape}")
    kernels = _as_kernel_stack(kernels)
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ConfigError(f"stride must be a positive integer, got {stride!r}")
    kshape = kernels.shape[1:]
    if any(k > n for k, n in zip(kshape, inputs.shape[1:])):
        raise DimensionError(
            f"kernel extents {kshape} exceed input extents {inputs.shape[1:]}"
        )
    if bias is None:
        bias = np.zeros(kernels.shape[0])
    bias = np.asarray(bias, dtype=np.float64)
    if bias.shape != (kernels.shape[0],):
        raise DimensionError(
            f"bias must have one entry per kernel ({kernels.shape[0]}), got shape {bias.shape}"
        )
    windows = sliding_window_view(inputs, kshape, axis=(1, 2, 3))
    windows = windows[:, ::stride, ::stride, ::stride]
    out = np.einsum("bdhwxyz,cxyz->bcdhw", windows, kernels)
    out += bias[None, :, None, None, None]
    return out


def flatten(t) -> np.ndarray:
    """Row-major linearization to a rank-1 tensor (values preserved in order)."""
    return np.ascontiguousarray(t, dtype=np.float64).reshape(-1)


def sum_over_first_axis(t) -> np.ndarray:
    """Elementwise sum of all slices along the first axis (rank drops by one)."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim < 2:
        raise DimensionError(f"need rank >= 2 to sum over the first axis, got shape {t.shape}")
    return t.sum(axis=0)
