"""Dense numeric primitives used by the transformer and the quantizer.

Tensors are plain ``numpy.ndarray`` objects holding float32 elements.
Reductions accumulate in float64 where it matters for reproducibility.
Most functions accept leading batch dimensions and operate on the last
one or two axes.
"""
import numpy as np
from scipy.special import erf

from . import kernels

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def as_tensor(data, shape=None):
    """Build a float32 tensor, optionally reshaping and checking finiteness."""
    arr = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise ShapeError(f"{arr.size} elements cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def matmul(a, b):
    """Matrix product over the last two axes; batch axes broadcast."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax_rows(a):
    a = np.asarray(a)
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, gamma, beta, eps=1e-6):
    """LayerNorm over the last axis with the population variance."""
    x = np.asarray(x)
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=-1, keepdims=True)
    y = (x64 - mean) / np.sqrt(var + eps)
    return (y * gamma + beta).astype(DTYPE)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    x = np.asarray(x)
    return (0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))).astype(x.dtype)


def singular_values(m):
    """Descending singular values of a 2-D matrix (one-sided Jacobi)."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"singular_values expects a matrix, got shape {m.shape}")
    return kernels.singular_values(m)


def nuclear_norm(m):
    return float(np.sum(singular_values(m)))
