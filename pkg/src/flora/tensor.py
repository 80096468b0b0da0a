"""Dense tensor primitives: mode-n unfolding/folding, mode-n products, norms.

Tensors are plain ``numpy.ndarray`` objects in float64, C (row-major) order.
Modes are 0-based, so mode ``n`` of an order-N tensor satisfies
``0 <= n < N``.

Unfolding follows the Kolda & Bader convention: in ``unfold(t, n)`` the
row index is ``i_n`` and the remaining indices enumerate the columns with
the earliest remaining mode varying fastest.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

__all__ = [
    "as_tensor",
    "as_matrix",
    "unfold",
    "fold",
    "mode_n_product",
    "multi_mode_product",
    "frobenius_norm",
    "matmul",
    "transpose",
    "axpy",
]


def as_tensor(x, name: str = "tensor") -> np.ndarray:
    """Return ``x`` as a finite float64 C-contiguous array.

    Raises ``ValueError`` on NaN/Inf entries or zero-sized extents.
    """
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 0:
        raise ValueError(f"{name} must have at least one mode")
    if any(e <= 0 for e in arr.shape):
        raise ValueError(f"{name} has a non-positive extent: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = as_tensor(x, name)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _check_mode(n: int, ndim: int) -> int:
    if not isinstance(n, (int, np.integer)) or not 0 <= n < ndim:
        raise ValueError(f"mode {n!r} out of range for an order-{ndim} tensor")
    return int(n)


def unfold(t, n: int) -> np.ndarray:
    """Mode-n matricization.

    Parameters
    ----------
    t : ndarray
        Tensor of shape ``(I_0, ..., I_{N-1})``.
    n : int
        Mode to unfold along.

    Returns
    -------
    ndarray
        Matrix of shape ``(I_n, prod_{m != n} I_m)``. Entry ``(i_0..i_{N-1})``
        lands in column ``sum_{m != n} i_m * prod_{l < m, l != n} I_l``.
    """
    t = as_tensor(t)
    n = _check_mode(n, t.ndim)
    moved = np.moveaxis(t, n, 0)
    return np.ascontiguousarray(moved.reshape(t.shape[n], -1, order="F"))


def fold(m, n: int, shape: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`unfold`: rebuild a tensor of ``shape`` from its mode-n unfolding."""
    m = as_matrix(m)
    shape = tuple(int(s) for s in shape)
    n = _check_mode(n, len(shape))
    rest = shape[:n] + shape[n + 1:]
    if m.shape != (shape[n], int(np.prod(rest, dtype=np.int64))):
        raise ValueError(
            f"matrix of shape {m.shape} cannot be folded into {shape} along mode {n}"
        )
    t = m.reshape((shape[n],) + rest, order="F")
    return np.ascontiguousarray(np.moveaxis(t, 0, n))


def mode_n_product(t, u, n: int) -> np.ndarray:
    """Compute ``t x_n u``.

    The extent ``I_n`` of ``t`` is replaced by ``u.shape[0]``; ``u.shape[1]``
    must equal ``I_n``.
    """
    t = as_tensor(t)
    u = as_matrix(u, "factor")
    n = _check_mode(n, t.ndim)
    if u.shape[1] != t.shape[n]:
        raise ValueError(
            f"factor with {u.shape[1]} columns cannot contract mode {n} of extent {t.shape[n]}"
        )
    new_shape = t.shape[:n] + (u.shape[0],) + t.shape[n + 1:]
    return fold(u @ unfold(t, n), n, new_shape)


def multi_mode_product(core, factors, skip=None, transpose_factors=False) -> np.ndarray:
    """Chain ``core x_0 factors[0] x_1 factors[1] ...``.

    ``skip`` names a mode left untouched. With ``transpose_factors`` each
    factor is applied as its transpose, which maps a full tensor back to
    core coordinates.
    """
    out = as_tensor(core, "core")
    if len(factors) != out.ndim:
        raise ValueError(f"expected {out.ndim} factors, got {len(factors)}")
    for n, f in enumerate(factors):
        if n == skip:
            continue
        f = as_matrix(f, f"factor {n}")
        out = mode_n_product(out, f.T if transpose_factors else f, n)
    return out


def frobenius_norm(t) -> float:
    t = np.asarray(t, dtype=np.float64)
    return float(np.sqrt(np.sum(t * t)))


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def axpy(alpha: float, x, y) -> np.ndarray:
    """Return ``alpha * x + y``; shapes must match exactly (no broadcasting)."""
    x = as_tensor(x, "x")
    y = as_tensor(y, "y")
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if not np.isfinite(alpha):
        raise ValueError("alpha must be finite")
    return alpha * x + y
